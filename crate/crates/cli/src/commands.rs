use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use capsule_detector::capsule::saliency::saliency_map;
use capsule_detector::capsule::{self, CapsuleNet, CapsuleNetConfig};
use capsule_detector::config::RunConfig;
use capsule_detector::metrics;
use capsule_detector::pipeline::{self, Manifest, Preprocess, Split, Unit};
use capsule_detector::toy::{self, ToySpec, ToyTask};
use capsule_detector::training::{self, Checkpoint, EpochReport, Examples, ScoreReport, Trainer, EVAL_BATCH};
use capsule_detector::vgg::{self, VggPrefix};
use capsule_detector::{Error, Result, RngStream};

use crate::{Cli, Command, Overrides, SplitArg, TaskArg};

/// Key of the initialization stream under the run seed.
const INIT_STREAM: u64 = 0x696e_6974;
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            overrides,
            out,
            checkpoint,
            epochs,
        } => train(&overrides, out, checkpoint.as_deref(), epochs),
        Command::Eval {
            overrides,
            checkpoint,
            out,
            split,
        } => eval(&overrides, &checkpoint, out, split),
        Command::Infer { checkpoint, paths } => infer(&checkpoint, &paths),
        Command::Saliency {
            checkpoint,
            image,
            class,
            out,
        } => saliency(&checkpoint, &image, &class, &out),
        Command::Inspect {
            checkpoint,
            capsules,
            classes,
        } => inspect(checkpoint.as_deref(), capsules, classes),
        Command::Synth {
            out,
            task,
            size,
            groups,
            frames,
            eval_groups,
            seed,
        } => synth(&out, task, size, groups, frames, eval_groups, seed),
    }
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &o.manifest {
        c.data.manifest = Some(m.clone());
    }
    if let Some(s) = o.seed {
        c.train.seed = s;
    }
    if let Some(n) = o.capsules {
        c.model.capsules = n;
    }
    if let Some(j) = o.classes {
        c.model.classes = j;
    }
    if let Some(s) = o.input_size {
        c.model.input_size = Some(s);
    }
    Ok(c)
}

fn manifest(c: &RunConfig) -> Result<Manifest> {
    let path = c
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no manifest: set data.manifest or pass --manifest".into()))?;
    let m = Manifest::load(path)?;
    m.validate_labels(&c.class_names())?;
    Ok(m)
}

fn load_split(m: &Manifest, split: Split, frames: usize, classes: &[String], prep: &Preprocess) -> Result<Vec<Unit>> {
    let sel = pipeline::build_split(m, split, frames, true);
    let loaded = pipeline::load_units(m, &sel, classes, prep)?;
    for s in &loaded.skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    Ok(loaded.units)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn epoch_line(r: &EpochReport, val: Option<&ScoreReport>, best: bool) -> String {
    #[derive(Serialize)]
    struct Line<'a> {
        #[serde(flatten)]
        report: &'a EpochReport,
        val_accuracy: Option<f64>,
        best: bool,
    }
    serde_json::to_string(&Line {
        report: r,
        val_accuracy: val.map(|v| v.unit_metrics.accuracy),
        best,
    })
    .expect("epoch line serializes")
}

fn train(o: &Overrides, out: Option<PathBuf>, resume: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    let mut c = load_config(o)?;
    if let Some(e) = epochs {
        c.train.epochs = e;
    }
    if let Some(dir) = out {
        c.io.checkpoint_dir = dir;
    }
    c.validate()?;
    let m = manifest(&c)?;
    let classes = c.class_names();
    let prep = c.preprocess();

    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_model(&c.net_config())?;
            if ck.header.preprocess != prep {
                return Err(Error::Config("checkpoint preprocessing differs from the configuration".into()));
            }
            let mut t = ck.into_trainer();
            t.config.epochs = c.train.epochs;
            t
        }
        None => {
            let init = RngStream::new(c.train.seed).split(INIT_STREAM);
            let prefix = match &c.io.weights {
                Some(w) => VggPrefix::load(w)?,
                None => VggPrefix::random(&mut init.split(1)),
            };
            let net = CapsuleNet::new(c.net_config(), &mut init.split(2))?;
            Trainer::new(prefix, net, c.train)?
        }
    };

    let train_units = load_split(&m, Split::Train, c.data.frames_train, &classes, &prep)?;
    let val_units = load_split(&m, Split::Val, c.data.frames_eval, &classes, &prep)?;
    let side = c
        .network_side()
        .or_else(|| train_units.first().map(|u| u.image.shape()[1].max(u.image.shape()[2])))
        .unwrap_or(vgg::MIN_INPUT);
    let batch = c.train.batch_size(side);
    let train_data = Examples::prepare(&trainer.prefix, &train_units)?;
    let val_data = Examples::prepare(&trainer.prefix, &val_units)?;
    println!(
        "training on {} units ({} val), batch {batch}, epochs {}..={}",
        train_data.len(),
        val_data.len(),
        trainer.epoch + 1,
        trainer.config.epochs
    );

    let dir = c.io.checkpoint_dir.clone();
    create_dir(&dir)?;
    write(&dir.join("config.toml"), &c.to_toml())?;
    let log_path = dir.join("epochs.jsonl");
    // A fresh run starts a new log; a resumed one continues it.
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let every = c.train.checkpoint_every;
    let total = trainer.config.epochs;
    let fit = training::fit(
        &mut trainer,
        &train_data,
        (!val_data.is_empty()).then_some(&val_data),
        batch,
        &classes,
        &mut |t, r, v, best| {
            let line = epoch_line(r, v, best);
            println!("{line}");
            writeln!(log, "{line}").map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            let ck = Checkpoint::from_trainer(t, &classes, prep);
            if (every > 0 && r.epoch % every == 0) || r.epoch == total {
                ck.save(&dir.join("last.ckpt"))?;
            }
            if best {
                ck.save(&dir.join("best.ckpt"))?;
            }
            Ok(())
        },
    )?;
    if fit.best_epoch.is_none() && trainer.epoch == total {
        Checkpoint::from_trainer(&trainer, &classes, prep).save(&dir.join("best.ckpt"))?;
    }
    match fit.best_epoch {
        Some(b) => println!("best val accuracy {:.4} at epoch {}", b.val_accuracy, b.epoch),
        None => println!("no val split: best.ckpt is the final model"),
    }
    Ok(())
}

fn eval(o: &Overrides, checkpoint: &Path, out: Option<PathBuf>, split: SplitArg) -> Result<()> {
    let mut c = load_config(o)?;
    let ck = Checkpoint::load(checkpoint)?;
    if o.capsules.is_none() && o.classes.is_none() && o.config.is_none() {
        c.model.capsules = ck.header.model.capsules;
        c.model.classes = ck.header.model.classes;
    }
    if c.data.class_names.is_none() {
        c.data.class_names = Some(ck.header.class_names.clone());
    }
    if let Some(dir) = out {
        c.io.report_dir = dir;
    }
    c.validate()?;
    ck.check_model(&c.net_config())?;
    let m = manifest(&c)?;
    let classes = c.class_names();
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let units = load_split(&m, split, c.data.frames_eval, &classes, &ck.header.preprocess)?;
    let data = Examples::prepare(&ck.prefix, &units)?;
    let report = training::evaluate(&ck.prefix, &ck.net, &data, &classes, c.data.threshold)?;
    let dir = &c.io.report_dir;
    create_dir(dir)?;
    training::write_scores(&dir.join("scores.jsonl"), &report.samples)?;
    training::write_scores(&dir.join("group_scores.jsonl"), &report.groups)?;
    write(&dir.join("report.json"), &report.to_json())?;
    for (name, m) in [("roc.csv", &report.unit_metrics), ("group_roc.csv", &report.group_metrics)] {
        if let Some(b) = &m.binary {
            write(&dir.join(name), &metrics::roc_csv(&b.roc))?;
        }
    }
    print!("{}", report.summary_text());
    Ok(())
}

fn image_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Data("no images found".into()));
    }
    Ok(files)
}

fn infer(checkpoint: &Path, paths: &[PathBuf]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        path: String,
        probs: Vec<f64>,
        class: &'a str,
        units: usize,
    }
    let ck = Checkpoint::load(checkpoint)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for file in image_files(paths)? {
        let image = pipeline::load_image(&file)?;
        let parts = ck.header.preprocess.apply(&image, None)?;
        let units: Vec<Unit> = parts
            .into_iter()
            .enumerate()
            .map(|(k, image)| Unit {
                id: k.to_string(),
                group_id: String::new(),
                label: 0,
                image,
            })
            .collect();
        let data = Examples::prepare(&ck.prefix, &units)?;
        let probs = training::predict_examples(&ck.prefix, &ck.net, &data, EVAL_BATCH)?;
        let avg = pipeline::aggregate_scores(&probs)?;
        let class = metrics::predicted_class(&avg, metrics::DEFAULT_THRESHOLD);
        let line = serde_json::to_string(&Line {
            path: file.display().to_string(),
            probs: avg,
            class: &ck.header.class_names[class],
            units: data.len(),
        })
        .expect("line serializes");
        match writeln!(lock, "{line}") {
            Ok(()) => {}
            // The reader went away (e.g. `| head`); nothing left to do.
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
            Err(e) => {
                return Err(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                })
            }
        }
    }
    Ok(())
}

fn saliency(checkpoint: &Path, image: &Path, class: &str, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let names = &ck.header.class_names;
    let target = match class.parse::<usize>() {
        Ok(i) => i,
        Err(_) => names
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| Error::Config(format!("unknown class {class:?}; classes are {names:?}")))?,
    };
    let prep = Preprocess {
        patch_size: None,
        ..ck.header.preprocess
    };
    let img = prep
        .apply(&pipeline::load_image(image)?, None)?
        .pop()
        .expect("one input without patches");
    let map = saliency_map(&ck.net, &ck.prefix, &img, target)?;
    pipeline::save_gray_png(out, &map)?;
    println!("wrote {} ({}x{})", out.display(), map.shape()[1], map.shape()[0]);
    Ok(())
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn inspect(checkpoint: Option<&Path>, capsules: usize, classes: usize) -> Result<()> {
    let (prefix, net, extra) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let h = &ck.header;
            let extra = format!(
                "checkpoint: epoch {}, classes {:?}, preprocess {:?}\n",
                h.epoch, h.class_names, h.preprocess
            );
            (ck.prefix, ck.net, extra)
        }
        None => {
            let cfg = CapsuleNetConfig {
                capsules,
                classes,
                ..CapsuleNetConfig::light(classes)
            };
            (VggPrefix::<f32>::random(&mut RngStream::new(0)), CapsuleNet::zeros(cfg)?, String::new())
        }
    };
    let cfg = net.config();
    let per = net.per_capsule_parameter_count();
    let head = net.parameter_count();
    let total = capsule::total_parameter_count(&prefix, &net);
    let r = &cfg.routing;
    print!("{extra}");
    println!("feature extractor  VGG-19 conv1_1..conv3_1, {} channels at 1/8 input side", vgg::FEATURE_CHANNELS);
    println!(
        "primary capsule    conv3x3 256->{} BN ReLU, conv3x3 {}->{} BN ReLU, mean/variance pool, conv1d 2->{} k5 s2 BN ReLU, conv1d {}->1 k3 BN",
        capsule::TRUNK_CHANNELS,
        capsule::TRUNK_CHANNELS,
        capsule::STAT_CHANNELS,
        capsule::CONV1D_CHANNELS,
        capsule::CONV1D_CHANNELS
    );
    println!(
        "routing            {} primary -> {} output capsules of dim {}, r = {}, noise sigma {}, dropout {}",
        cfg.capsules,
        cfg.classes,
        capsule::OUTPUT_DIM,
        r.iterations,
        r.noise_sigma,
        r.dropout
    );
    println!("parameters");
    for (label, n) in [
        ("prefix", prefix.parameter_count()),
        ("per capsule", per),
        ("capsule head", head),
        ("total", total),
    ] {
        println!("  {label:<14}{:>12}", group_digits(n));
    }
    Ok(())
}

fn synth(out: &Path, task: TaskArg, size: usize, groups: usize, frames: usize, eval_groups: usize, seed: u64) -> Result<()> {
    let spec = ToySpec {
        task: match task {
            TaskArg::Binary => ToyTask::Binary,
            TaskArg::FourWay => ToyTask::FourWay,
        },
        size,
        groups_per_class: groups,
        frames_per_group: frames,
        seed,
    };
    if groups == 0 || frames == 0 || size < vgg::MIN_INPUT {
        return Err(Error::Config(format!(
            "need at least one group and frame and a size of at least {}",
            vgg::MIN_INPUT
        )));
    }
    create_dir(out)?;
    let m = toy::write_dataset(out, &spec, eval_groups)?;
    println!(
        "wrote {} images and {} (classes {:?})",
        m.entries.len(),
        out.join("manifest.jsonl").display(),
        spec.task.class_names()
    );
    Ok(())
}
