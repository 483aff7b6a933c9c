//! Zero-shot recognition against label texts and multiple-choice
//! text-to-motion retrieval.
//!
//! Both rank by cosine similarity of unit-norm projections. Exact ties go to
//! the lowest candidate index.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{stream_rng, Model};
use crate::nn::{Real, Tensor};
use crate::{Error, Result};

/// Candidates per retrieval question.
pub const CANDIDATES: usize = 15;
/// Number of label classes used for retrieval at desk scale.
pub const DESK_RETRIEVAL_LABELS: usize = 8;
pub const DESK_RETRIEVAL_QUESTIONS: usize = 200;
pub const PAPER_RETRIEVAL_LABELS: usize = 15;
pub const PAPER_RETRIEVAL_QUESTIONS: usize = 450;
const EMBED_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub truth: usize,
    pub predicted: usize,
    /// The three most similar labels with their cosine similarity, best first.
    pub top3: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    pub accuracy: f64,
    pub labels: Vec<String>,
    /// `confusion[truth][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<ClipPrediction>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Candidate order by descending score; equal scores keep index order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn item_embeddings<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    which: &[usize],
) -> Result<Tensor<f64>> {
    let frames: Vec<&[f32]> = which
        .iter()
        .map(|&i| data.items[i].frames.as_slice())
        .collect();
    model.embed_motion(&frames, EMBED_BATCH)
}

/// Predicts each item's label as the most similar label text.
pub fn eval_recognition<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    labels: &[String],
) -> Result<RecognitionReport> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "recognition needs at least one label".into(),
        ));
    }
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let truths = data
        .items
        .iter()
        .map(|it| {
            it.label
                .as_deref()
                .and_then(|l| index.get(l).copied())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "item from {} has label {:?} outside the label set",
                        it.source, it.label
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let text = model.embed_texts(labels, EMBED_BATCH)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let motion = item_embeddings(model, data, &all)?;

    let k = labels.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for (i, &truth) in truths.iter().enumerate() {
        let sims: Vec<f64> = (0..k).map(|j| dot(motion.row(i), text.row(j))).collect();
        let order = ranking(&sims);
        let predicted = order[0];
        confusion[truth][predicted] += 1;
        correct += usize::from(predicted == truth);
        let top3 = order
            .iter()
            .take(3)
            .map(|&j| (labels[j].clone(), sims[j]))
            .collect();
        predictions.push(ClipPrediction {
            truth,
            predicted,
            top3,
        });
    }
    let accuracy = if data.is_empty() {
        0.0
    } else {
        correct as f64 / data.len() as f64
    };
    Ok(RecognitionReport {
        accuracy,
        labels: labels.to_vec(),
        confusion,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuestion {
    pub query: String,
    /// Dataset item indices.
    pub candidates: Vec<usize>,
    /// Position of the matching clip within `candidates`.
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top3: f64,
    pub questions: usize,
}

/// Composes `n_questions` questions over the `n_labels` most frequent labels
/// (ties by first appearance). Each question holds one clip of the query
/// label and 14 distractors spread as evenly as possible over the other
/// selected labels, in shuffled positions.
pub fn build_retrieval_questions(
    data: &Dataset,
    n_labels: usize,
    n_questions: usize,
    seed: u64,
) -> Result<Vec<RetrievalQuestion>> {
    if n_labels < 2 {
        return Err(Error::InvalidArgument(
            "retrieval needs at least 2 labels".into(),
        ));
    }
    let order = data.labels();
    let mut by_label: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, it) in data.items.iter().enumerate() {
        if let Some(l) = &it.label {
            by_label.entry(l.as_str()).or_default().push(i);
        }
    }
    let mut eligible: Vec<&str> = order
        .iter()
        .map(String::as_str)
        .filter(|l| by_label[l].len() >= 2)
        .collect();
    eligible.sort_by_key(|l| std::cmp::Reverse(by_label[l].len()));
    if eligible.len() < n_labels {
        return Err(Error::InvalidArgument(format!(
            "retrieval needs {n_labels} labels with at least 2 clips each, dataset has {}",
            eligible.len()
        )));
    }
    let chosen = &eligible[..n_labels];
    let distractors = CANDIDATES - 1;
    let total: usize = chosen.iter().map(|l| by_label[l].len()).sum();
    for l in chosen {
        let available = total - by_label[l].len();
        if available < distractors {
            return Err(Error::InvalidArgument(format!(
                "label {l:?} has only {available} distractor clips, {distractors} needed"
            )));
        }
    }

    let mut rng = stream_rng(seed, 0, 0);
    let mut questions = Vec::with_capacity(n_questions);
    for _ in 0..n_questions {
        let qi = rng.random_range(0..n_labels);
        let query = chosen[qi];
        let correct_clip = *by_label[query].choose(&mut rng).expect("label has clips");
        let mut others: Vec<&str> = chosen.iter().copied().filter(|l| *l != query).collect();
        others.shuffle(&mut rng);
        let mut pools: Vec<Vec<usize>> = others
            .iter()
            .map(|l| {
                let mut p = by_label[l].clone();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let mut candidates = vec![correct_clip];
        while candidates.len() < CANDIDATES {
            let before = candidates.len();
            for pool in pools.iter_mut() {
                if candidates.len() == CANDIDATES {
                    break;
                }
                if let Some(c) = pool.pop() {
                    candidates.push(c);
                }
            }
            if candidates.len() == before {
                return Err(Error::InvalidArgument(format!(
                    "not enough distractors for label {query:?}"
                )));
            }
        }
        candidates.shuffle(&mut rng);
        let correct = candidates
            .iter()
            .position(|&c| c == correct_clip)
            .expect("correct clip present");
        questions.push(RetrievalQuestion {
            query: query.to_string(),
            candidates,
            correct,
        });
    }
    Ok(questions)
}

/// Rank of the correct candidate (0 = best) under text-to-motion similarity.
fn correct_rank(sims: &[f64], correct: usize) -> usize {
    ranking(sims)
        .iter()
        .position(|&c| c == correct)
        .expect("candidate present")
}

pub fn eval_retrieval<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    questions: &[RetrievalQuestion],
) -> Result<RetrievalReport> {
    if questions.is_empty() {
        return Ok(RetrievalReport {
            top1: 0.0,
            top3: 0.0,
            questions: 0,
        });
    }
    let mut used: Vec<usize> = questions
        .iter()
        .flat_map(|q| q.candidates.iter().copied())
        .collect();
    used.sort_unstable();
    used.dedup();
    if let Some(&bad) = used.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidArgument(format!(
            "question refers to item {bad} of {}",
            data.len()
        )));
    }
    let row: HashMap<usize, usize> = used.iter().enumerate().map(|(r, &i)| (i, r)).collect();
    let motion = item_embeddings(model, data, &used)?;
    let mut queries: Vec<&str> = questions.iter().map(|q| q.query.as_str()).collect();
    queries.sort_unstable();
    queries.dedup();
    let text = model.embed_texts(&queries, EMBED_BATCH)?;

    let (mut top1, mut top3) = (0usize, 0usize);
    for q in questions {
        let t = text.row(
            queries
                .binary_search(&q.query.as_str())
                .expect("query embedded"),
        );
        let sims: Vec<f64> = q
            .candidates
            .iter()
            .map(|c| dot(t, motion.row(row[c])))
            .collect();
        let rank = correct_rank(&sims, q.correct);
        top1 += usize::from(rank < 1);
        top3 += usize::from(rank < 3);
    }
    let n = questions.len() as f64;
    Ok(RetrievalReport {
        top1: top1 as f64 / n,
        top3: top3 as f64 / n,
        questions: questions.len(),
    })
}
