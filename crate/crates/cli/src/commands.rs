use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use surgline_core::dualenc::EncoderHandle;
use surgline_core::embedding::EmbeddingMatrix;
use surgline_core::image::{FrameImage, PngFrameDirectory};
use surgline_core::ingest::{
    balance as balance_records, class_counts, labels_from_intervals, make_split, parse_gesture_transcript,
    parse_phase_annotation, sample_frames, sort_records, synth_dataset, Balancing, DatasetSplit, FrameRecord,
    FrameSet, Manifest, ManifestEntry, PhaseNameMap, RowCountPolicy, SplitName, SplitSpec, SynthConfig,
};
use surgline_core::metrics::{confusion, evaluate};
use surgline_core::timeline::{build_timeline, export_phase_diagram, truth_timeline, DEFAULT_WINDOW};
use surgline_core::trainstage::{
    run_stage, train_linear_probe, InitFrom, ProbeConfig, ProbeSplits, Selection, StageConfig, DESK_LEARNING_RATE,
};
use surgline_core::util::{read_json, sha256_hex, write_json};
use surgline_core::vocab::{load_vocabulary, ClassVocabulary, Task};
use surgline_core::zeroshot::{
    build_prototypes, predict_from_embeddings, read_predictions_csv, write_cosines_csv, write_predictions_csv,
    Aggregation, FrameRef, Prediction, DUMP_TOP_K,
};
use surgline_core::EncoderKind;

use crate::config::{parse_enum, resolve_seed, FileConfig};
use crate::manifest::RunManifest;
use crate::{
    BalanceArgs, EncoderArgs, EvalArgs, PredictArgs, PrepareArgs, ProbeArgs, SplitArgs, SynthArgs, TimelineArgs,
    TrainArgs,
};

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn vocab_for(task: Task, path: Option<&Path>) -> Result<ClassVocabulary> {
    match path {
        Some(p) => {
            let v = load_vocabulary(p)?;
            if v.task != task {
                bail!("vocabulary {} is for {}, expected {task}", p.display(), v.task);
            }
            Ok(v)
        }
        None => Ok(ClassVocabulary::builtin(task)),
    }
}

fn task_of_label(label: &str) -> Result<Task> {
    [Task::Gesture, Task::Phase]
        .into_iter()
        .find(|t| label.starts_with(t.id_prefix()))
        .with_context(|| format!("cannot infer the task from label {label:?}; pass --task"))
}

fn load_frames(path: &Path) -> Result<FrameSet> {
    FrameSet::load(path).with_context(|| format!("loading frame set {}", path.display()))
}

fn load_split(path: &Path) -> Result<DatasetSplit> {
    DatasetSplit::load(path).with_context(|| format!("loading split {}", path.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, &file);
    let mut cfg = SynthConfig::new(a.classes, a.per_class, a.image_size, a.noise, seed.value);
    cfg.n_videos = a.videos;
    let task = if cfg.label_prefix == 'P' { Task::Phase } else { Task::Gesture };
    if cfg.n_classes != task.class_count() {
        log::warn!(
            "{} synthetic classes do not match the {} built-in {task} classes",
            cfg.n_classes,
            task.class_count()
        );
    }
    let ds = synth_dataset(&cfg)?;
    let out = &a.common.out;
    create_out(out)?;
    let frames_dir = out.join("frames");
    let mut records = ds.records;
    for r in &mut records {
        let img = r.image.load()?;
        let path = PngFrameDirectory::frame_path(&frames_dir.join(&r.video_id), r.frame_index);
        img.save_png(&path)?;
        r.image = FrameImage::File(path);
    }
    let set = FrameSet {
        task,
        effective_fps: surgline_core::ingest::SYNTH_FPS,
        records,
    };
    set.save(&out.join("frames.json"))?;
    let manifest = Manifest {
        videos: ds
            .videos
            .iter()
            .map(|v| ManifestEntry {
                video_id: v.video_id.clone(),
                path: frames_dir.join(&v.video_id),
                fps: v.fps,
                frame_count: v.frame_count,
                annotation: None,
                task,
            })
            .collect(),
    };
    manifest.save(&out.join("videos.json"))?;

    let mut run = RunManifest::new("synth", a.common.config.as_deref(), serde_json::to_value(&cfg)?)
        .seed(seed.value, seed.generated);
    run.output(out, "frames", "frames")?;
    run.output(out, "frame_set", "frames.json")?;
    run.output(out, "videos", "videos.json")?;
    run.write(out)?;
    Ok(())
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let task: Task = a.task.parse()?;
    let policy = match a.row_policy.as_str() {
        "strict" => RowCountPolicy::Strict,
        "truncate" => RowCountPolicy::Truncate,
        other => bail!("invalid row policy {other:?}"),
    };
    let vocab = vocab_for(task, a.vocab.as_deref())?;
    let name_map = match &a.phase_map {
        Some(p) => PhaseNameMap::load(p)?,
        None => PhaseNameMap::builtin(),
    };
    let manifest = Manifest::load(&a.manifest).with_context(|| format!("loading {}", a.manifest.display()))?;
    let mut records = Vec::new();
    let mut fps: Option<f64> = None;
    for entry in manifest.videos.iter().filter(|v| v.task == task) {
        let meta = entry.meta()?;
        let ann = entry
            .annotation
            .as_ref()
            .with_context(|| format!("video {} has no annotation file", entry.video_id))?;
        let labels: Vec<Option<String>> = match task {
            Task::Gesture => {
                let intervals = parse_gesture_transcript(ann, &meta, &vocab)?;
                labels_from_intervals(&intervals, meta.frame_count)
            }
            Task::Phase => parse_phase_annotation(ann, &meta, &name_map, policy)?
                .into_iter()
                .map(Some)
                .collect(),
        };
        let sampled = sample_frames(&meta, &labels, a.stride, &PngFrameDirectory)?;
        match fps {
            Some(f) if (f - sampled.effective_fps).abs() > 1e-9 => bail!(
                "video {} samples at {} fps, others at {f} fps",
                entry.video_id,
                sampled.effective_fps
            ),
            _ => fps = Some(sampled.effective_fps),
        }
        records.extend(sampled.records);
    }
    let Some(effective_fps) = fps else {
        bail!("manifest lists no {task} videos");
    };
    sort_records(&mut records);
    let out = &a.common.out;
    create_out(out)?;
    FrameSet {
        task,
        effective_fps,
        records,
    }
    .save(&out.join("frames.json"))?;

    let config = json!({"task": task, "stride": a.stride, "row_policy": a.row_policy});
    let mut run = RunManifest::new("prepare", a.common.config.as_deref(), config);
    run.input("manifest", &a.manifest)?;
    // Annotation paths as written in the manifest, so the record does not
    // depend on where the manifest lives.
    let raw: Manifest = read_json(&a.manifest)?;
    for (entry, shown) in manifest.videos.iter().zip(&raw.videos).filter(|(v, _)| v.task == task) {
        if let (Some(ann), Some(shown)) = (&entry.annotation, &shown.annotation) {
            run.input_as(&format!("annotation:{}", entry.video_id), shown, ann)?;
        }
    }
    run.output(out, "frame_set", "frames.json")?;
    run.write(out)?;
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, &file);
    let videos = match (&a.videos, &a.frames) {
        (Some(v), _) => v.clone(),
        (None, Some(f)) => {
            let set = load_frames(f)?;
            let ids: std::collections::BTreeSet<String> = set.records.iter().map(|r| r.video_id.clone()).collect();
            ids.into_iter().collect()
        }
        (None, None) => bail!("pass --frames or --videos"),
    };
    let spec = match (&a.ratios, &a.counts) {
        (_, Some(c)) => SplitSpec::Counts(c[0], c[1], c[2]),
        (Some(r), None) => SplitSpec::Ratios(r[0], r[1], r[2]),
        (None, None) => SplitSpec::Ratios(0.7, 0.1, 0.2),
    };
    let split = make_split(&videos, spec, seed.value)?;
    let out = &a.common.out;
    create_out(out)?;
    split.save(&out.join("split.json"))?;

    let mut run = RunManifest::new(
        "split",
        a.common.config.as_deref(),
        json!({"spec": spec, "videos": videos}),
    )
    .seed(seed.value, seed.generated);
    if let Some(f) = &a.frames {
        run.input("frame_set", f)?;
    }
    run.output(out, "split", "split.json")?;
    run.write(out)?;
    Ok(())
}

pub fn balance(a: BalanceArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, &file);
    let mode: Balancing = match a.mode.as_deref().or(file.balancing.as_deref()) {
        Some(m) => parse_enum("balancing mode", m)?,
        None => Balancing::Upsample,
    };
    let set = load_frames(&a.frames)?;
    let split = load_split(&a.split)?;
    let parts = split.partition(&set.records)?;
    let before = class_counts(&parts.train);
    let balanced = balance_records(&parts.train, mode, seed.value)?;
    let after = class_counts(&balanced);
    let out = &a.common.out;
    create_out(out)?;
    FrameSet {
        task: set.task,
        effective_fps: set.effective_fps,
        records: balanced,
    }
    .save(&out.join("balanced_train.json"))?;
    write_json(&out.join("class_counts.json"), &json!({"before": before, "after": after}))?;

    let mut run = RunManifest::new("balance", a.common.config.as_deref(), json!({ "mode": mode }))
        .seed(seed.value, seed.generated);
    run.input("frame_set", &a.frames)?;
    run.input("split", &a.split)?;
    run.output(out, "balanced_train", "balanced_train.json")?;
    run.output(out, "class_counts", "class_counts.json")?;
    run.write(out)?;
    Ok(())
}

pub enum TrainKind {
    Gestures,
    Phases(PathBuf),
    Control { long: bool },
}

pub fn train(a: TrainArgs, kind: TrainKind) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, &file);
    let (mut enc, mut cfg, command) = match &kind {
        TrainKind::Gestures | TrainKind::Control { .. } => {
            let enc = match &a.backbone {
                Some(dir) => EncoderHandle::load_pretrained(dir)?,
                None => EncoderHandle::surrogate(seed.value),
            };
            let (cfg, command) = match kind {
                TrainKind::Gestures => (StageConfig::gesture_ft(seed.value), "train-gestures"),
                TrainKind::Control { long: true } => (StageConfig::control_long(seed.value), "train-control"),
                _ => (StageConfig::control(seed.value), "train-control"),
            };
            (enc, cfg, command)
        }
        TrainKind::Phases(init) => {
            let (enc, header) = EncoderHandle::load_checkpoint(init)
                .with_context(|| format!("loading checkpoint {}", init.display()))?;
            (enc, StageConfig::phase_ft(header.id, seed.value), "train-phases")
        }
    };
    if let Some(v) = a.epochs.or(file.epochs) {
        cfg.epochs = v;
    }
    cfg.learning_rate = match a.lr.or(file.learning_rate) {
        Some(lr) => lr,
        None if enc.kind() == EncoderKind::Surrogate => DESK_LEARNING_RATE,
        None => cfg.learning_rate,
    };
    if let Some(v) = a.batch.or(file.batch_size) {
        cfg.batch_size = v;
    }
    if let Some(m) = a.balancing.as_deref().or(file.balancing.as_deref()) {
        cfg.balancing = parse_enum("balancing mode", m)?;
    }
    if let Some(k) = a.unfreeze_last_k.or(file.unfreeze_last_k) {
        cfg.freeze.unfreeze_last_k = k;
    }
    if let Some(v) = a.train_projections.or(file.train_projections) {
        cfg.freeze.train_projections = v;
    }
    if let Some(v) = a.train_logit_scale.or(file.train_logit_scale) {
        cfg.freeze.train_logit_scale = v;
    }
    if let Some(s) = a.selection.as_deref().or(file.selection.as_deref()) {
        cfg.selection = parse_enum::<Selection>("selection", s)?;
    }
    cfg.validate()?;

    let set = load_frames(&a.frames)?;
    let task = cfg.stage.task();
    if set.task != task {
        bail!("{command} needs {task} frames, {} holds {}", a.frames.display(), set.task);
    }
    let vocab = vocab_for(task, a.vocab.as_deref())?;
    let data = load_split(&a.split)?.partition(&set.records)?;
    let record = run_stage(&mut enc, &data, &vocab, &cfg)?;

    let out = &a.common.out;
    create_out(out)?;
    enc.save_checkpoint(&out.join("checkpoint.safetensors"), &record.id, &record.to_json())?;
    record.save_history_csv(&out.join("history.csv"))?;
    write_json(&out.join("record.json"), &record)?;

    let init = match &cfg.init_from {
        InitFrom::PretrainedBase => json!("pretrained_base"),
        InitFrom::Checkpoint { id } => json!({ "checkpoint": id }),
    };
    let snapshot = json!({
        "stage": cfg,
        "encoder": enc.kind(),
        "init": init,
        "backbone": a.backbone,
    });
    let mut run = RunManifest::new(command, a.common.config.as_deref(), snapshot).seed(seed.value, seed.generated);
    run.input("frame_set", &a.frames)?;
    run.input("split", &a.split)?;
    if let TrainKind::Phases(init) = &kind {
        run.input("init", init)?;
    }
    if let Some(dir) = &a.backbone {
        run.input("backbone", dir)?;
    }
    run.output(out, "checkpoint", "checkpoint.safetensors")?;
    run.output(out, "history", "history.csv")?;
    run.output(out, "record", "record.json")?;
    run.write(out)?;
    Ok(())
}

/// Checkpoint, backbone, or a fresh surrogate seeded with `seed`.
fn load_encoder(a: &EncoderArgs, seed: u64) -> Result<(EncoderHandle, serde_json::Value)> {
    match (&a.checkpoint, &a.backbone) {
        (Some(c), _) => {
            let (enc, header) =
                EncoderHandle::load_checkpoint(c).with_context(|| format!("loading checkpoint {}", c.display()))?;
            Ok((enc, json!({ "checkpoint": header.id })))
        }
        (None, Some(dir)) => Ok((EncoderHandle::load_pretrained(dir)?, json!({ "backbone": dir }))),
        (None, None) => Ok((EncoderHandle::surrogate(seed), json!({ "surrogate_seed": seed }))),
    }
}

fn record_encoder_inputs(run: &mut RunManifest, a: &EncoderArgs) -> Result<()> {
    if let Some(c) = &a.checkpoint {
        run.input("checkpoint", c)?;
    }
    if let Some(d) = &a.backbone {
        run.input("backbone", d)?;
    }
    Ok(())
}

/// Image embeddings, reused from `SURGLINE_CACHE` when the encoder
/// parameters, preprocessing and frame contents match.
fn image_embeddings(enc: &EncoderHandle, records: &[FrameRecord]) -> Result<EmbeddingMatrix> {
    let images: Vec<FrameImage> = records.iter().map(|r| r.image.clone()).collect();
    let Some(cache) = std::env::var_os("SURGLINE_CACHE") else {
        return Ok(enc.encode_images(&images)?);
    };
    let mut key = String::new();
    key.push_str(&enc.param_digest());
    key.push_str(&serde_json::to_string(enc.preprocess())?);
    for img in &images {
        let pixels = img.load()?;
        let bytes: Vec<u8> = pixels.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        key.push_str(&sha256_hex(&bytes));
    }
    let path = Path::new(&cache).join(format!("embeddings-{}.json", sha256_hex(key.as_bytes())));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(emb) = serde_json::from_str::<EmbeddingMatrix>(&text) {
            log::info!("embedding cache hit {}", path.display());
            return Ok(emb);
        }
    }
    let emb = enc.encode_images(&images)?;
    write_json(&path, &emb)?;
    Ok(emb)
}

pub fn probe(a: ProbeArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, &file);
    let defaults = ProbeConfig::default();
    let cfg = ProbeConfig {
        epochs: a.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        learning_rate: a.lr.or(file.learning_rate).unwrap_or(defaults.learning_rate),
        batch_size: a.batch.or(file.batch_size).unwrap_or(defaults.batch_size),
        seed: seed.value,
    };
    let (enc, enc_desc) = load_encoder(&a.encoder, seed.value)?;
    let set = load_frames(&a.frames)?;
    let vocab = vocab_for(set.task, a.vocab.as_deref())?;
    let parts = load_split(&a.split)?.partition(&set.records)?;
    let mut records = Vec::new();
    let mut splits = ProbeSplits::default();
    for (name, rows) in [
        (SplitName::Train, &mut splits.train),
        (SplitName::Val, &mut splits.val),
        (SplitName::Test, &mut splits.test),
    ] {
        for r in parts.get(name) {
            rows.push(records.len());
            records.push(r.clone());
        }
    }
    let emb = image_embeddings(&enc, &records)?;
    let labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
    let result = train_linear_probe(&emb, &labels, &vocab.class_ids(), &cfg, &splits)?;
    let out = &a.common.out;
    create_out(out)?;
    write_json(&out.join("probe.json"), &result)?;

    let mut run = RunManifest::new(
        "probe",
        a.common.config.as_deref(),
        json!({"probe": cfg, "encoder": enc_desc}),
    )
    .seed(seed.value, seed.generated);
    run.input("frame_set", &a.frames)?;
    run.input("split", &a.split)?;
    record_encoder_inputs(&mut run, &a.encoder)?;
    run.output(out, "probe", "probe.json")?;
    run.write(out)?;
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = resolve_seed(a.common.seed, &file);
    let (enc, enc_desc) = load_encoder(&a.encoder, seed.value)?;
    let set = load_frames(&a.frames)?;
    let vocab = vocab_for(set.task, a.vocab.as_deref())?;
    let records: Vec<FrameRecord> = match &a.split {
        Some(s) => {
            let name = match a.subset.as_str() {
                "train" => SplitName::Train,
                "val" => SplitName::Val,
                "test" => SplitName::Test,
                other => bail!("invalid subset {other:?}"),
            };
            load_split(s)?.partition(&set.records)?.get(name).to_vec()
        }
        None => set.records.clone(),
    };
    if records.is_empty() {
        bail!("no frames to predict");
    }
    let aggregation: Aggregation = match a.aggregation.as_deref().or(file.aggregation.as_deref()) {
        Some(s) => parse_enum("aggregation", s)?,
        None => Aggregation::default(),
    };
    let top = a.top.unwrap_or(DUMP_TOP_K).min(vocab.len());
    let protos = build_prototypes(&enc, &vocab, aggregation)?;
    let emb = image_embeddings(&enc, &records)?;
    let refs: Vec<FrameRef> = records.iter().map(FrameRef::from).collect();
    let preds = predict_from_embeddings(&protos, &emb, &refs, enc.logit_scale(), top)?;
    let out = &a.common.out;
    create_out(out)?;
    write_predictions_csv(&out.join("preds.csv"), &preds)?;
    write_cosines_csv(&out.join("cosines.csv"), &protos.class_ids, &preds)?;

    let config = json!({
        "encoder": enc_desc,
        "aggregation": aggregation,
        "top": top,
        "subset": a.split.as_ref().map(|_| a.subset.clone()),
    });
    let mut run = RunManifest::new("predict", a.common.config.as_deref(), config).seed(seed.value, seed.generated);
    run.input("frame_set", &a.frames)?;
    if let Some(s) = &a.split {
        run.input("split", s)?;
    }
    record_encoder_inputs(&mut run, &a.encoder)?;
    run.output(out, "predictions", "preds.csv")?;
    run.output(out, "cosines", "cosines.csv")?;
    run.write(out)?;
    Ok(())
}

fn read_preds(path: &Path) -> Result<Vec<Prediction>> {
    let preds = read_predictions_csv(path).with_context(|| format!("reading {}", path.display()))?;
    if preds.is_empty() {
        bail!("{} holds no predictions", path.display());
    }
    Ok(preds)
}

fn task_for(preds: &[Prediction], flag: Option<&str>) -> Result<Task> {
    match flag {
        Some(t) => Ok(t.parse()?),
        None => {
            let label = preds
                .iter()
                .find_map(|p| p.frame.true_label.as_deref())
                .unwrap_or(preds[0].top1());
            task_of_label(label)
        }
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let preds = read_preds(&a.preds)?;
    let task = task_for(&preds, a.task.as_deref())?;
    let vocab = vocab_for(task, a.vocab.as_deref())?;
    let ks = a.k.clone().or(file.k.clone()).unwrap_or_else(|| vec![1, 5]);
    let class_ids = vocab.class_ids();
    let report = evaluate(&preds, &class_ids, &ks)?;
    let cm = confusion(&preds, &class_ids, true)?;
    let out = &a.common.out;
    create_out(out)?;
    report.save_json(&out.join("metrics.json"))?;
    report.save_csv(&out.join("metrics.csv"))?;
    cm.save_counts_csv(&out.join("confusion.csv"))?;
    cm.save_normalized_csv(&out.join("confusion_normalized.csv"))?;

    let mut run = RunManifest::new("eval", a.common.config.as_deref(), json!({"task": task, "k": ks}));
    run.input("predictions", &a.preds)?;
    for (name, rel) in [
        ("metrics_json", "metrics.json"),
        ("metrics_csv", "metrics.csv"),
        ("confusion", "confusion.csv"),
        ("confusion_normalized", "confusion_normalized.csv"),
    ] {
        run.output(out, name, rel)?;
    }
    run.write(out)?;
    Ok(())
}

pub fn timeline(a: TimelineArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let preds = read_preds(&a.preds)?;
    let task = task_for(&preds, a.task.as_deref())?;
    let vocab = vocab_for(task, a.vocab.as_deref())?;
    let window = a.window.or(file.window).unwrap_or(DEFAULT_WINDOW);
    let mut by_video: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for p in preds {
        by_video.entry(p.frame.video_id.clone()).or_default().push(p);
    }
    let out = &a.common.out;
    create_out(out)?;
    let mut run = RunManifest::new("timeline", a.common.config.as_deref(), json!({"task": task, "window": window}));
    run.input("predictions", &a.preds)?;
    for (video, mut stream) in by_video {
        stream.sort_by_key(|p| p.frame.frame_index);
        let refs: Vec<FrameRef> = stream.iter().map(|p| p.frame.clone()).collect();
        let tl = build_timeline(&refs, &stream, window, &vocab).with_context(|| format!("video {video}"))?;
        let json_name = format!("timeline_{video}.json");
        let text_name = format!("narrative_{video}.txt");
        tl.save_json(&out.join(&json_name))?;
        tl.save_narrative(&out.join(&text_name))?;
        run.output(out, &json_name, &json_name)?;
        run.output(out, &text_name, &text_name)?;
        if stream.iter().all(|p| p.frame.true_label.is_some()) {
            let truth = truth_timeline(&stream, &vocab)?;
            let grid: Vec<f64> = stream.iter().map(|p| p.frame.timestamp_s).collect();
            let diagram = export_phase_diagram(&tl, &truth, &grid)?;
            let csv_name = format!("phase_diagram_{video}.csv");
            let agree_name = format!("agreement_{video}.json");
            diagram.save_csv(&out.join(&csv_name))?;
            write_json(
                &out.join(&agree_name),
                &json!({"overall": diagram.overall_agreement, "per_class": diagram.agreement}),
            )?;
            run.output(out, &csv_name, &csv_name)?;
            run.output(out, &agree_name, &agree_name)?;
        }
    }
    run.write(out)?;
    Ok(())
}
