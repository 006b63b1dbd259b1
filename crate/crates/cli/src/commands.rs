use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rgbt_core::data::{batch_input, letterbox, load_paired_dataset, DatasetManifest, PairedDataset, PairedSample, Split};
use rgbt_core::detector::{stage_image, DetectModel, Modality, Scale, Stage, Topology};
use rgbt_core::fusion::{FusionMode, Model};
use rgbt_core::geometry::BoxXyxy;
use rgbt_core::mcf::{build_mcf_model, load_mcf_checkpoint};
use rgbt_core::nn::Mode;
use rgbt_core::train::{model_dtype, predict_prepared, prepare, train, validate, PresetName};
use rgbt_core::transfer::{duplicate_backbone, load_with_transfer, AdaptStrategy, Checkpoint};
use rgbt_core::{Error, Result};

use crate::config::RunConfig;
use crate::draw::{class_color, draw_box};
use crate::{Command, Common, SplitArg, OUT_ROOT_ENV};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            common,
            fusion,
            scale,
            preset,
            weights,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = fusion {
                cfg.model.set_fusion(&f)?;
            }
            if let Some(s) = scale {
                cfg.model.scale = s.parse::<Scale>()?;
            }
            if let Some(p) = preset {
                cfg.train.preset = p.parse::<PresetName>()?;
            }
            cfg.validate()?;
            cmd_train(&cfg, &out_dir(&cfg, &common, "train"), weights.as_deref())
        }
        Command::Val { common, weights, split } => {
            let mut cfg = load_config(&common)?;
            // Evaluation thresholds live in the train section.
            if let Some(c) = common.conf {
                cfg.train.conf = c;
            }
            if let Some(i) = common.iou {
                cfg.train.iou = i;
            }
            cfg.validate()?;
            cmd_val(&cfg, &out_dir(&cfg, &common, "val"), &weights, split)
        }
        Command::Predict { common, weights, split } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = common.conf {
                cfg.nms.conf = c;
            }
            if let Some(i) = common.iou {
                cfg.nms.iou = i;
            }
            cfg.validate()?;
            cmd_predict(&cfg, &out_dir(&cfg, &common, "predict"), &weights, split)
        }
        Command::FinetuneMcf {
            common,
            base_weights,
            primary,
            preset,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = primary {
                cfg.mcf.primary = p.parse::<Modality>()?;
            }
            if let Some(p) = preset {
                cfg.train.preset = p.parse::<PresetName>()?;
            }
            cfg.validate()?;
            cmd_finetune(&cfg, &out_dir(&cfg, &common, "finetune-mcf"), &base_weights)
        }
        Command::Transfer {
            src,
            target_mode,
            strategy,
            out,
            seed,
        } => cmd_transfer(&src, target_mode.parse()?, strategy.parse()?, &out, seed),
        Command::Features {
            common,
            weights,
            stage,
            split,
        } => {
            let cfg = load_config(&common)?;
            let stage: Stage = stage.parse()?;
            cmd_features(&cfg, &out_dir(&cfg, &common, "features"), &weights, stage, split)
        }
        Command::Info {
            fusion,
            scale,
            classes,
            ir_channels,
        } => {
            let mut model_cfg = crate::config::ModelConfig {
                scale: scale.parse()?,
                ..Default::default()
            };
            model_cfg.set_fusion(&fusion)?;
            let spec = model_cfg.spec(classes, ir_channels)?;
            print!("{}", info_table(&Model::new(&spec, 0)?, &fusion));
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if common.deterministic {
        cfg.train.deterministic = true;
    }
    Ok(cfg)
}

/// `--out`, then the config's `out_dir`, then `$RGBT_OUT_ROOT/<command>`,
/// then `runs/<command>`.
fn out_dir(cfg: &RunConfig, common: &Common, command: &str) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = &cfg.out_dir {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn save_image(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Prepares the output directory and echoes the effective config into it.
fn start_output(cfg: &RunConfig, out: &Path) -> Result<RunConfig> {
    create_dir(out)?;
    let out = out.canonicalize().map_err(io_err(out))?;
    let effective = RunConfig {
        out_dir: Some(out.clone()),
        ..cfg.clone()
    };
    effective.echo(&out)?;
    Ok(effective)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Box<dyn DetectModel>> {
    let ck = Checkpoint::load(path)?;
    if ck.manifest.mcf_primary.is_some() {
        Ok(Box::new(load_mcf_checkpoint(&ck)?))
    } else {
        Ok(Box::new(ck.build_model()?.with_score_merge_iou(cfg.model.score_merge_iou)))
    }
}

fn check_classes(model: &dyn DetectModel, manifest: &DatasetManifest) -> Result<()> {
    let spec = model.spec();
    if spec.num_classes != manifest.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            spec.num_classes, manifest.num_classes
        )));
    }
    if spec.ir_channels != manifest.ir_channels {
        return Err(Error::Config(format!(
            "checkpoint expects {}-channel infrared, dataset has {}",
            spec.ir_channels, manifest.ir_channels
        )));
    }
    Ok(())
}

fn load_split(cfg: &RunConfig, model: &dyn DetectModel, split: Split) -> Result<PairedDataset> {
    let manifest = cfg.dataset_manifest()?;
    let ds = load_paired_dataset(&cfg.dataset_root, split, model.modality_policy(), &manifest)?;
    for e in &ds.exclusions {
        eprintln!("excluded {}: missing {}", e.stem, e.missing.join(", "));
    }
    Ok(ds)
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path, weights: Option<&Path>) -> Result<()> {
    let manifest = cfg.dataset_manifest()?;
    let spec = cfg.model.spec(manifest.num_classes, manifest.ir_channels)?;
    let model = Model::new(&spec, cfg.train.seed)?.with_score_merge_iou(cfg.model.score_merge_iou);
    let effective = start_output(cfg, out)?;
    let out = effective.out_dir.as_deref().expect("set by start_output");
    if let Some(w) = weights {
        let report = load_with_transfer(&Checkpoint::load(w)?, model.store(), AdaptStrategy::CopyScaled)?;
        write_file(&out.join("transfer_report.txt"), report.to_text())?;
        eprintln!(
            "initialized from {}: {} copied, {} adapted, {} duplicated, {} fresh",
            w.display(),
            report.copied.len(),
            report.channel_adapted.len(),
            report.duplicated.len(),
            report.unmatched.len()
        );
    }
    let train_set = load_split(cfg, &model, Split::Train)?;
    let val_set = load_split(cfg, &model, Split::Val)?;
    let outcome = train(&model, &train_set.samples, Some(&val_set.samples), &cfg.train, Some(out))?;
    if let Some(r) = &outcome.last_report {
        let text = r.to_text(&manifest.names);
        write_file(&out.join("metrics.txt"), &text)?;
        print!("{text}");
    }
    println!("iterations {}", outcome.iterations);
    println!("checkpoints {}", out.display());
    Ok(())
}

fn cmd_val(cfg: &RunConfig, out: &Path, weights: &Path, split: SplitArg) -> Result<()> {
    let model = load_model(weights, cfg)?;
    let manifest = cfg.dataset_manifest()?;
    check_classes(model.as_ref(), &manifest)?;
    let ds = load_split(cfg, model.as_ref(), split_of(split))?;
    let report = validate(
        model.as_ref(),
        &ds.samples,
        cfg.train.img_size,
        cfg.train.batch_size,
        cfg.train.conf,
        cfg.train.iou,
    )?;
    let effective = start_output(cfg, out)?;
    let out = effective.out_dir.as_deref().expect("set by start_output");
    let text = report.to_text(&manifest.names);
    write_file(&out.join("metrics.txt"), &text)?;
    write_file(&out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(())
}

fn detection_lines(dets: &[rgbt_core::detector::Detection], map: impl Fn(&BoxXyxy) -> BoxXyxy) -> String {
    let mut s = String::new();
    for d in dets {
        let b = map(&d.bbox);
        let _ = writeln!(s, "{} {:.6} {:.2} {:.2} {:.2} {:.2}", d.class_id, d.score, b.x1, b.y1, b.x2, b.y2);
    }
    s
}

fn cmd_predict(cfg: &RunConfig, out: &Path, weights: &Path, split: SplitArg) -> Result<()> {
    let model = load_model(weights, cfg)?;
    let manifest = cfg.dataset_manifest()?;
    check_classes(model.as_ref(), &manifest)?;
    let ds = load_split(cfg, model.as_ref(), split_of(split))?;
    let mut prepared = Vec::with_capacity(ds.samples.len());
    let mut transforms = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let (p, t) = letterbox(s, cfg.train.img_size)?;
        prepared.push(p);
        transforms.push(t);
    }
    let dets = predict_prepared(model.as_ref(), &prepared, cfg.train.batch_size, cfg.nms.conf, cfg.nms.iou)?;

    let effective = start_output(cfg, out)?;
    let out = effective.out_dir.as_deref().expect("set by start_output");
    let (labels_dir, images_dir) = (out.join("labels"), out.join("images"));
    create_dir(&labels_dir)?;
    create_dir(&images_dir)?;
    let mut total = 0;
    for ((sample, t), d) in ds.samples.iter().zip(&transforms).zip(&dets) {
        let (w, h) = sample.size();
        let to_source = |b: &BoxXyxy| {
            let (x1, y1) = t.invert_point(b.x1, b.y1);
            let (x2, y2) = t.invert_point(b.x2, b.y2);
            BoxXyxy::new(
                x1.clamp(0.0, w as f64),
                y1.clamp(0.0, h as f64),
                x2.clamp(0.0, w as f64),
                y2.clamp(0.0, h as f64),
            )
        };
        write_file(&labels_dir.join(format!("{}.txt", sample.image_id)), detection_lines(d, to_source))?;
        let mut canvas = annotation_base(sample);
        for det in d {
            draw_box(&mut canvas, &to_source(&det.bbox), class_color(det.class_id), 2);
        }
        save_image(&DynamicImage::ImageRgb8(canvas), &images_dir.join(format!("{}.png", sample.image_id)))?;
        total += d.len();
    }
    println!("{} images, {total} detections, written to {}", ds.samples.len(), out.display());
    Ok(())
}

fn annotation_base(sample: &PairedSample) -> image::RgbImage {
    sample
        .image(Modality::Rgb)
        .or(sample.image(Modality::Ir))
        .expect("sample has an image")
        .to_rgb8()
}

fn cmd_finetune(cfg: &RunConfig, out: &Path, base_weights: &Path) -> Result<()> {
    let base = Checkpoint::load(base_weights)?;
    let manifest = cfg.dataset_manifest()?;
    let spec = base.manifest.spec.clone().with_ir_channels(manifest.ir_channels);
    if spec.num_classes != manifest.num_classes {
        return Err(Error::Config(format!(
            "base checkpoint has {} classes, dataset has {}",
            spec.num_classes, manifest.num_classes
        )));
    }
    match spec.topology {
        Topology::Single(m) if m == cfg.mcf.primary => {}
        _ => {
            return Err(Error::Config(format!(
                "base checkpoint is {}, expected a single-modality {} detector",
                base.manifest.fusion_name(),
                cfg.mcf.primary.name()
            )))
        }
    }
    let mcf = build_mcf_model(&base, &spec, cfg.mcf.primary, cfg.mcf.aux_init, cfg.train.seed)?;
    let effective = start_output(cfg, out)?;
    let out = effective.out_dir.as_deref().expect("set by start_output");
    let report = mcf.freeze_report();
    write_file(&out.join("freeze_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "frozen {} tensors ({} params), trainable {} tensors ({} params)",
        report.frozen_names.len(),
        report.frozen_params,
        report.trainable_names.len(),
        report.trainable_params
    );
    let train_set = load_split(cfg, &mcf, Split::Train)?;
    let val_set = load_split(cfg, &mcf, Split::Val)?;
    let outcome = train(&mcf, &train_set.samples, Some(&val_set.samples), &cfg.train, Some(out))?;
    if let Some(r) = &outcome.last_report {
        let text = r.to_text(&manifest.names);
        write_file(&out.join("metrics.txt"), &text)?;
        print!("{text}");
    }
    println!("iterations {}", outcome.iterations);
    Ok(())
}

fn cmd_transfer(src: &Path, mode: FusionMode, strategy: AdaptStrategy, out: &Path, seed: u64) -> Result<()> {
    let ck = Checkpoint::load(src)?;
    let mut target = ck.manifest.spec.clone();
    target.topology = Topology::Fused(mode);
    let (fused, report) = duplicate_backbone(&ck, &target, strategy, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fused.save(out)?;
    let text = report.to_text();
    write_file(&out.with_extension("report.txt"), &text)?;
    write_file(&out.with_extension("report.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(())
}

fn cmd_features(cfg: &RunConfig, out: &Path, weights: &Path, stage: Stage, split: SplitArg) -> Result<()> {
    let model = load_model(weights, cfg)?;
    let manifest = cfg.dataset_manifest()?;
    check_classes(model.as_ref(), &manifest)?;
    let ds = load_split(cfg, model.as_ref(), split_of(split))?;
    let prepared = prepare(&ds.samples, cfg.train.img_size)?;
    let effective = start_output(cfg, out)?;
    let out = effective.out_dir.as_deref().expect("set by start_output");
    let dtype = model_dtype(model.as_ref());
    for chunk in prepared.chunks(cfg.train.batch_size.max(1)) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let output = model.forward(&batch_input(&refs, dtype)?, Mode::Eval)?;
        for (i, s) in chunk.iter().enumerate() {
            let img = stage_image(output.pyramid.stage(stage), i)?;
            let path = out.join(format!("{}_{}.png", s.image_id, stage.name()));
            save_image(&DynamicImage::ImageLuma8(img), &path)?;
        }
    }
    println!("{} {} maps written to {}", prepared.len(), stage.name(), out.display());
    Ok(())
}

fn info_table(model: &Model, label: &str) -> String {
    let spec = model.spec();
    let mut s = String::new();
    let _ = writeln!(s, "model       {label}");
    let _ = writeln!(s, "scale       {}", spec.scale.name());
    let _ = writeln!(s, "classes     {}", spec.num_classes);
    let _ = writeln!(s, "in_channels {}", spec.in_channels());
    let _ = writeln!(s, "parameters  {}", model.parameter_count());
    let junctions = model.junctions();
    if !junctions.is_empty() {
        let _ = writeln!(s, "{:<16} {:<12} {:<14} {:>8} {:>10}", "junction", "stage", "combiner", "channels", "params");
        for j in junctions {
            let stage = serde_json::to_value(j.stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let comb = serde_json::to_value(j.combiner).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let _ = writeln!(s, "{:<16} {:<12} {:<14} {:>8} {:>10}", j.name, stage, comb, j.channels, j.params);
        }
    }
    s
}
