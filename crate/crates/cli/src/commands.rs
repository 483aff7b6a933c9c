use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use molang::data::{synth_generate, write_synth, Dataset, SynthSpec};
use molang::model::{Model, ModelConfig};
use molang::train::metrics::write_jsonl;
use molang::train::{
    ablation_run, build_retrieval_questions, eval_recognition, eval_retrieval, finetune,
    pretrain_mmp, train_contrastive, AblationConfig, Stage, Toggles, TrainOptions,
};
use serde_json::json;

use crate::config::{
    pick_preset, read_config_file, resolve, stage_defaults, write_provenance, AblateRun, TrainRun,
};
use crate::{data_workers, AblateArgs, EmbedArgs, EvalArgs, SynthArgs, Task, TrainArgs};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load_with_workers(path, data_workers())
        .with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(Model::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .0)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str::<SynthSpec>(&text)
                .with_context(|| format!("parsing spec {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    let ds = synth_generate(&spec, args.seed)?;
    write_synth(&args.out, &ds)
        .with_context(|| format!("writing benchmark to {}", args.out.display()))?;
    let config = json!({ "spec": spec, "seed": args.seed, "out": args.out });
    write_provenance(
        &args.out,
        "synth",
        &config,
        vec![
            ("train".into(), ds.train.fingerprint.clone()),
            ("test".into(), ds.test.fingerprint.clone()),
        ],
    )?;
    let summary = json!({
        "clips": ds.clips.len(),
        "train": ds.train.entries.len(),
        "test": ds.test.entries.len(),
        "train_fingerprint": ds.train.fingerprint,
        "test_fingerprint": ds.test.fingerprint,
    });
    println!("{summary}");
    Ok(())
}

fn resolve_train(stage: Stage, args: &TrainArgs) -> Result<TrainRun> {
    let file = args.config.as_deref().map(read_config_file).transpose()?;
    let preset = pick_preset(args.preset.map(Into::into), file.as_ref())?;
    let defaults = TrainRun {
        preset,
        model: ModelConfig::preset(preset),
        stage: stage_defaults(preset, stage),
        data: PathBuf::new(),
        out: PathBuf::new(),
        motion_ckpt: None,
        ckpt: None,
    };
    let mut run = resolve(&defaults, file)?;
    if run.preset != preset {
        bail!("config preset {:?} conflicts with --preset", run.preset);
    }
    if run.stage.stage != stage {
        bail!(
            "config is for stage {}, command runs {stage}",
            run.stage.stage
        );
    }
    if let Some(d) = &args.data {
        run.data = d.clone();
    }
    if let Some(o) = &args.out {
        run.out = o.clone();
    }
    if let Some(s) = args.seed {
        run.stage.seed = s;
    }
    if let Some(e) = args.epochs {
        run.stage.epochs = e;
    }
    if let Some(b) = args.batch_size {
        run.stage.batch_size = b;
    }
    if args.no_gcb {
        run.model.motion.use_gcb = false;
    }
    if args.no_recon {
        run.stage.alpha = 0.0;
    }
    if args.no_masking {
        run.stage.masking = false;
    }
    if args.motion_ckpt.is_some() {
        run.motion_ckpt = args.motion_ckpt.clone();
    }
    if args.ckpt.is_some() {
        run.ckpt = args.ckpt.clone();
    }
    if run.data.as_os_str().is_empty() {
        bail!("no training data: pass --data or set `data` in the config");
    }
    if run.out.as_os_str().is_empty() {
        bail!("no output directory: pass --out or set `out` in the config");
    }
    match stage {
        Stage::Contrastive if run.ckpt.is_some() => {
            bail!("--ckpt applies to finetune; use --motion-ckpt")
        }
        Stage::MmpPretrain if run.ckpt.is_some() || run.motion_ckpt.is_some() => {
            bail!("pretraining starts from scratch and takes no checkpoint")
        }
        Stage::Finetune if run.ckpt.is_none() => {
            bail!("finetune needs --ckpt (a contrastive-stage checkpoint)")
        }
        _ => {}
    }
    run.model.validate()?;
    run.stage.validate()?;
    Ok(run)
}

pub fn train(stage: Stage, args: &TrainArgs) -> Result<()> {
    let mut run = resolve_train(stage, args)?;
    let finetune_from = match &run.ckpt {
        Some(p) => {
            let m = load_model(p)?;
            if args.no_gcb && m.config.motion.use_gcb {
                bail!("--no-gcb cannot change the architecture of {}", p.display());
            }
            run.model = m.config.clone();
            Some(m)
        }
        None => None,
    };
    let motion_init = run.motion_ckpt.as_deref().map(load_model).transpose()?;
    let data = load_data(&run.data)?;
    write_provenance(
        &run.out,
        stage.name(),
        &run,
        vec![("data".into(), data.fingerprint.clone())],
    )?;
    let opts = TrainOptions {
        out_dir: Some(run.out.clone()),
        resume: args.resume,
        stop_after: None,
        progress: !args.quiet,
    };
    let outcome = match stage {
        Stage::MmpPretrain => pretrain_mmp(&data, &run.model, &run.stage, &opts)?,
        Stage::Contrastive => {
            train_contrastive(&data, &run.model, motion_init.as_ref(), &run.stage, &opts)?
        }
        Stage::Finetune => finetune(
            &data,
            finetune_from.expect("checked above"),
            &run.stage,
            &opts,
        )?,
    };
    let r = &outcome.report;
    match r.final_loss() {
        Some(l) => println!(
            "{stage}: final loss {l:.6} after {} epochs ({:.1}s)",
            r.epochs, r.wall_clock_s
        ),
        None => println!("{stage}: no epochs run"),
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    model
        .text_tower()
        .context("evaluation needs a checkpoint with a text encoder")?;
    let data = load_data(&args.data)?;
    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    match args.task {
        Task::Recognition => {
            let labels = args.labels.clone().unwrap_or_else(|| data.labels());
            let rep = eval_recognition(&model, &data, &labels)?;
            println!(
                "{}",
                json!({ "task": "recognition", "accuracy": rep.accuracy, "items": data.len(), "labels": rep.labels })
            );
            if let Some(out) = &args.out {
                let mut conf = String::from("truth");
                for l in &labels {
                    conf.push(',');
                    conf.push_str(&csv_field(l));
                }
                conf.push('\n');
                for (l, row) in labels.iter().zip(&rep.confusion) {
                    conf.push_str(&csv_field(l));
                    for c in row {
                        let _ = write!(conf, ",{c}");
                    }
                    conf.push('\n');
                }
                write_text(&out.join("confusion.csv"), &conf)?;
                let mut pred = String::from("id,truth,predicted,correct,similarity\n");
                let mut top3 = String::new();
                for (i, p) in rep.predictions.iter().enumerate() {
                    let _ = writeln!(
                        pred,
                        "{i},{},{},{},{}",
                        csv_field(&labels[p.truth]),
                        csv_field(&labels[p.predicted]),
                        u8::from(p.truth == p.predicted),
                        p.top3[0].1
                    );
                    let _ = writeln!(top3, "clip {i} ({})", labels[p.truth]);
                    for (rank, (l, s)) in p.top3.iter().enumerate() {
                        let _ = writeln!(top3, "  {}. {l}  {s:.4}", rank + 1);
                    }
                }
                write_text(&out.join("predictions.csv"), &pred)?;
                write_text(&out.join("top3.txt"), &top3)?;
            }
        }
        Task::Retrieval => {
            let questions =
                build_retrieval_questions(&data, args.retrieval_labels, args.questions, args.seed)?;
            let rep = eval_retrieval(&model, &data, &questions)?;
            println!(
                "{}",
                json!({ "task": "retrieval", "top1": rep.top1, "top3": rep.top3, "questions": rep.questions })
            );
            if let Some(out) = &args.out {
                let mut csv = String::from("question,query,correct,candidates\n");
                for (i, q) in questions.iter().enumerate() {
                    let cands: Vec<String> = q.candidates.iter().map(usize::to_string).collect();
                    let _ = writeln!(
                        csv,
                        "{i},{},{},{}",
                        csv_field(&q.query),
                        q.correct,
                        cands.join(";")
                    );
                }
                write_text(&out.join("questions.csv"), &csv)?;
            }
        }
    }
    Ok(())
}

fn grid_toggles(axes: &[String]) -> Result<Vec<Toggles>> {
    for a in axes {
        if !["mmp", "gcb", "cstar"].contains(&a.as_str()) {
            bail!("unknown ablation axis {a:?}; expected mmp, gcb or cstar");
        }
    }
    let on = |name: &str| axes.iter().any(|a| a == name);
    Ok(Toggles::grid()
        .into_iter()
        .filter(|t| (on("mmp") || t.mmp) && (on("gcb") || t.gcb) && (on("cstar") || t.cstar))
        .collect())
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let file = args.config.as_deref().map(read_config_file).transpose()?;
    let preset = pick_preset(args.preset.map(Into::into), file.as_ref())?;
    let defaults = AblateRun {
        preset,
        model: ModelConfig::preset(preset),
        pretrain: stage_defaults(preset, Stage::MmpPretrain),
        contrastive: stage_defaults(preset, Stage::Contrastive),
        train: PathBuf::new(),
        test: PathBuf::new(),
        out: PathBuf::new(),
        grid: vec!["mmp".into(), "gcb".into(), "cstar".into()],
        seeds: vec![0, 1, 2],
        retrieval_labels: molang::train::eval::DESK_RETRIEVAL_LABELS,
        retrieval_questions: molang::train::eval::DESK_RETRIEVAL_QUESTIONS,
    };
    let mut run = resolve(&defaults, file)?;
    if let Some(d) = &args.data {
        run.train = d.join("train.jsonl");
        run.test = d.join("test.jsonl");
    }
    if let Some(t) = &args.train {
        run.train = t.clone();
    }
    if let Some(t) = &args.test {
        run.test = t.clone();
    }
    if let Some(o) = &args.out {
        run.out = o.clone();
    }
    if args.grid != ["mmp", "gcb", "cstar"] {
        run.grid = args.grid.clone();
    }
    if args.seeds != 3 {
        run.seeds = (0..args.seeds).collect();
    }
    if let Some(e) = args.pretrain_epochs {
        run.pretrain.epochs = e;
    }
    if let Some(e) = args.epochs {
        run.contrastive.epochs = e;
    }
    if run.train.as_os_str().is_empty() || run.test.as_os_str().is_empty() {
        bail!("no data: pass --data DIR or --train/--test manifests");
    }
    if run.out.as_os_str().is_empty() {
        bail!("no output directory: pass --out");
    }
    let toggles = grid_toggles(&run.grid)?;
    let train = load_data(&run.train)?;
    let test = load_data(&run.test)?;
    write_provenance(
        &run.out,
        "ablate",
        &run,
        vec![
            ("train".into(), train.fingerprint.clone()),
            ("test".into(), test.fingerprint.clone()),
        ],
    )?;
    let cfg = AblationConfig {
        model: run.model.clone(),
        pretrain: run.pretrain.clone(),
        contrastive: run.contrastive.clone(),
        retrieval_labels: run.retrieval_labels,
        retrieval_questions: run.retrieval_questions,
    };
    let table = ablation_run(&train, &test, &cfg, &toggles, &run.seeds, !args.quiet)?;
    write_text(&run.out.join("ablation.csv"), &table.to_csv())?;
    write_text(&run.out.join("ablation.txt"), &table.to_table())?;
    write_jsonl(&run.out.join("rows.jsonl"), &table.rows)?;
    print!("{}", table.to_table());
    Ok(())
}

pub fn embed(args: &EmbedArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let data = load_data(&args.data)?;
    let frames: Vec<&[f32]> = data.items.iter().map(|i| i.frames.as_slice()).collect();
    let emb = model.embed_motion(&frames, 64)?;
    let p = emb.cols();
    let mut csv = String::from("id,label");
    for j in 0..p {
        let _ = write!(csv, ",e{j}");
    }
    csv.push('\n');
    for (i, item) in data.items.iter().enumerate() {
        let _ = write!(
            csv,
            "{i},{}",
            csv_field(item.label.as_deref().unwrap_or(&item.text))
        );
        for v in emb.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_text(&args.out, &csv)?;
    println!(
        "{}",
        json!({ "items": data.len(), "dim": p, "out": args.out })
    );
    Ok(())
}
