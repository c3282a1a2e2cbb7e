use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use evmae::ablation::{method_settings, run_ablation, threshold_settings, AblationData, AblationPlan, AblationRow, ModelSource};
use evmae::checkpoint::{load_checkpoint, save_checkpoint};
use evmae::event::{parse_aedat31_sized, parse_binary_events, parse_csv_events, write_binary_events, write_csv_events};
use evmae::model::mask_patches;
use evmae::patch::generate_patches;
use evmae::sampler::{sample_stream, window_rng};
use evmae::synth::{gen_classification_set, SynthConfig};
use evmae::train::{evaluate, finetune as run_finetune, pretrain as run_pretrain, TrainError};
use evmae::{CenterMethod, EventStream, MaeModel, Metrics, PatchSet, PointSet};

use crate::config::{ConfigArgs, RunConfig};
use crate::data::{self, Split};
use crate::error::CliError;
use crate::InputFormat;

fn log_config(cfg: &RunConfig) {
    log::info!("resolved config:\n{}", cfg.to_json());
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<fs::File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut f = create_file(path)?;
    write(&mut f).and_then(|_| f.flush()).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn ingest(input: &Path, format: InputFormat, size: Option<(u32, u32)>, out: &Path) -> Result<(), CliError> {
    let bytes = fs::read(input).map_err(|e| CliError::io(input, e))?;
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let format = match format {
        InputFormat::Auto => match ext.as_str() {
            "csv" => InputFormat::Csv,
            "aedat" => InputFormat::Aedat,
            _ => InputFormat::Evb1,
        },
        f => f,
    };
    let stream = match format {
        InputFormat::Csv => {
            let (w, h) = size.ok_or_else(|| CliError::Usage("CSV input needs --width and --height".into()))?;
            parse_csv_events(&bytes, w, h)?
        }
        InputFormat::Aedat => parse_aedat31_sized(&bytes, size)?,
        _ => parse_binary_events(&bytes)?,
    };
    log::info!("{} events, sensor {}x{}", stream.len(), stream.width(), stream.height());
    write_stream(&stream, out)
}

fn write_stream(stream: &EventStream, out: &Path) -> Result<(), CliError> {
    let csv = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    write_file(out, |w| {
        if csv {
            write_csv_events(stream, w)
        } else {
            write_binary_events(stream, w)
        }
    })
}

pub fn windows(input: &Path, out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    cfg.sampler.validate()?;
    log_config(&cfg);
    let stream = data::read_events(input)?;
    let windows = sample_stream(&stream, &cfg.sampler)?;
    create_dir(out)?;
    for (i, w) in windows.iter().enumerate() {
        write_file(&out.join(format!("window_{i:04}.csv")), |f| w.write_csv(f))?;
    }
    log::info!("wrote {} windows to {}", windows.len(), out.display());
    Ok(())
}

fn read_window(path: &Path) -> Result<PointSet, CliError> {
    PointSet::read_csv(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn patches(input: &Path, out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    cfg.patch.validate()?;
    log_config(&cfg);
    let set = generate_patches(&read_window(input)?, &cfg.patch, &mut window_rng(cfg.patch.seed, 0))?;
    if set.used_fallback() {
        log::warn!("{} of {} centers came from the fallback fill", set.fallback_count(), set.len());
    }
    write_file(out, |f| set.write_csv(f))
}

pub struct SynthArgs {
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub duration: Option<f64>,
    pub inlier_rate: Option<f64>,
    pub noise_rate: Option<f64>,
}

fn validate_synth(cfg: &SynthConfig, classes: usize) -> Result<(), CliError> {
    let bad = |m: String| Err(CliError::Usage(m));
    if !(2..=8).contains(&classes) {
        return bad(format!("--classes must be in 2..=8, got {classes}"));
    }
    if !(cfg.duration_s > 0.0 && cfg.duration_s.is_finite()) {
        return bad(format!("duration must be positive, got {}", cfg.duration_s));
    }
    if !(cfg.inlier_rate >= 0.0 && cfg.noise_rate >= 0.0 && cfg.inlier_rate.is_finite() && cfg.noise_rate.is_finite()) {
        return bad("event rates must be finite and non-negative".into());
    }
    if !(1..=65_536).contains(&cfg.width) || !(1..=65_536).contains(&cfg.height) {
        return bad(format!("sensor size {}x{} out of range", cfg.width, cfg.height));
    }
    Ok(())
}

pub fn synth(args: SynthArgs, out: &Path) -> Result<(), CliError> {
    let mut base = match &args.config {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => SynthConfig::default(),
    };
    base.duration_s = args.duration.unwrap_or(base.duration_s);
    base.inlier_rate = args.inlier_rate.unwrap_or(base.inlier_rate);
    base.noise_rate = args.noise_rate.unwrap_or(base.noise_rate);
    validate_synth(&base, args.classes)?;
    log::info!("synth config:\n{}", serde_json::to_string_pretty(&base).expect("config serializes"));
    create_dir(out)?;
    let set = gen_classification_set(args.samples, args.classes, &base, args.seed);
    let mut labels = String::from("file,class\n");
    for s in &set {
        let name = format!("sample_{:04}.evb1", s.id);
        write_stream(&s.data.stream, &out.join(&name))?;
        labels.push_str(&format!("{name},{}\n", s.class_id));
    }
    let path = out.join(data::LABELS_FILE);
    fs::write(&path, labels).map_err(|e| CliError::io(&path, e))?;
    log::info!("wrote {} samples of {} classes to {}", set.len(), args.classes, out.display());
    Ok(())
}

/// Metrics rows to a CSV file and to stdout as they arrive.
struct MetricsSink {
    path: PathBuf,
    file: std::io::BufWriter<fs::File>,
    error: Option<CliError>,
}

impl MetricsSink {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = create_file(&path)?;
        let mut sink = MetricsSink { path, file, error: None };
        sink.line(Metrics::CSV_HEADER);
        Ok(sink)
    }

    fn line(&mut self, s: &str) {
        if self.error.is_some() {
            return;
        }
        if let Err(e) = writeln!(self.file, "{s}") {
            self.error = Some(CliError::io(&self.path, e));
        }
        let mut out = std::io::stdout().lock();
        // A closed stdout should not abort training; the file still gets every row.
        let _ = writeln!(out, "{s}").and_then(|_| out.flush());
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.file.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Per-step callback: streams metrics and writes periodic checkpoints.
/// Write failures are kept and reported once training returns.
fn on_step<'a>(
    sink: &'a mut MetricsSink,
    out: &'a Path,
    every: usize,
    ckpt_err: &'a mut Option<CliError>,
) -> impl FnMut(&MaeModel, &Metrics) -> Result<(), TrainError> + 'a {
    move |model, m| {
        sink.line(&m.csv_row());
        if every > 0 && m.step % every == 0 && ckpt_err.is_none() {
            let path = out.join(format!("step_{:06}.evmc", m.step));
            if let Err(e) = save_checkpoint(model, &path) {
                *ckpt_err = Some(e.into());
            }
        }
        Ok(())
    }
}

fn train_outputs(out: &Path, cfg: &RunConfig, name: &str) -> Result<MetricsSink, CliError> {
    create_dir(out)?;
    let path = out.join("config.json");
    fs::write(&path, cfg.to_json()).map_err(|e| CliError::io(&path, e))?;
    MetricsSink::create(out.join(format!("{name}.csv")))
}

pub fn pretrain(data_dir: &Path, out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let mut cfg = args.resolve()?;
    cfg.model.patch_k = cfg.patch.k;
    cfg.sampler.validate()?;
    cfg.patch.validate()?;
    cfg.train.validate()?;
    log_config(&cfg);
    let mut model = MaeModel::new(cfg.model.clone())?;
    let entries = data::load_dir(data_dir, &cfg.sampler)?;
    let sets = data::patch_entries(&entries, &cfg.patch)?;
    log::info!("pre-training on {} windows", sets.len());

    let mut sink = train_outputs(out, &cfg, "pretrain")?;
    let mut ckpt_err = None;
    let history = run_pretrain(
        &mut model,
        &sets,
        &cfg.train,
        on_step(&mut sink, out, cfg.train.checkpoint_every, &mut ckpt_err),
    )?;
    sink.finish()?;
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    save_checkpoint(&model, &out.join("pretrain.evmc"))?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("loss {:.6} -> {:.6}", first.loss, last.loss);
    }
    Ok(())
}

/// Resolves the config of a run that starts from `model`: the model section
/// is taken from the checkpoint and patches are built with its `k`.
fn config_for(model: &MaeModel, args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = args.resolve()?;
    if cfg.patch.k != model.config().patch_k {
        if args.k.is_some() {
            return Err(CliError::Usage(format!(
                "--k {} does not match the checkpoint's k = {}",
                cfg.patch.k,
                model.config().patch_k
            )));
        }
        cfg.patch.k = model.config().patch_k;
    }
    cfg.model = model.config().clone();
    cfg.sampler.validate()?;
    cfg.patch.validate()?;
    Ok(cfg)
}

fn labeled_sets(entries: &[data::Entry], cfg: &RunConfig) -> Result<Vec<(PatchSet, usize)>, CliError> {
    let labels = data::labels_of(entries)?;
    Ok(data::patch_entries(entries, &cfg.patch)?.into_iter().zip(labels).collect())
}

pub fn finetune(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    classes: Option<usize>,
    all: bool,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let pre = load_checkpoint(ckpt)?;
    let cfg = config_for(&pre, args)?;
    cfg.train.validate()?;
    let entries = data::load_dir(data_dir, &cfg.sampler)?;
    let (train, held): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| all || Split::Train.keeps(e.id));
    let train_sets = labeled_sets(&train, &cfg)?;
    let max_label = train_sets.iter().map(|(_, l)| *l).max().unwrap_or(0);
    let n_classes = classes.unwrap_or(max_label + 1).max(2);
    let mut clf = pre.with_new_head(n_classes, cfg.train.seed)?;
    let cfg = RunConfig {
        model: clf.config().clone(),
        ..cfg
    };
    log_config(&cfg);
    log::info!("fine-tuning on {} windows, {n_classes} classes", train_sets.len());

    let mut sink = train_outputs(out, &cfg, "finetune")?;
    let mut ckpt_err = None;
    run_finetune(
        &mut clf,
        &train_sets,
        &cfg.train,
        on_step(&mut sink, out, cfg.train.checkpoint_every, &mut ckpt_err),
    )?;
    sink.finish()?;
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    save_checkpoint(&clf, &out.join("finetune.evmc"))?;
    if !held.is_empty() {
        let m = evaluate(&clf, &labeled_sets(&held, &cfg)?)?;
        log::info!(
            "held-out: {} windows, loss {:.6}, accuracy {:.4}",
            held.len(),
            m.loss,
            m.accuracy.unwrap_or(0.0)
        );
    }
    Ok(())
}

pub fn eval(ckpt: &Path, data_dir: &Path, split: Split, args: &ConfigArgs) -> Result<(), CliError> {
    let model = load_checkpoint(ckpt)?;
    let cfg = config_for(&model, args)?;
    log_config(&cfg);
    let entries = data::select(data::load_dir(data_dir, &cfg.sampler)?, split);
    let sets = labeled_sets(&entries, &cfg)?;
    let m = evaluate(&model, &sets)?;
    let name = format!("{split:?}").to_lowercase();
    println!("split,windows,loss,acc");
    println!("{name},{},{:?},{:?}", sets.len(), m.loss, m.accuracy.unwrap_or(0.0));
    Ok(())
}

const POINT_HEADER: &str = "patch_id,x,y,t";

fn write_points(path: &Path, rows: &[(usize, [f64; 3])]) -> Result<(), CliError> {
    write_file(path, |f| {
        writeln!(f, "{POINT_HEADER}")?;
        for (id, p) in rows {
            writeln!(f, "{id},{},{},{}", p[0], p[1], p[2])?;
        }
        Ok(())
    })
}

fn patch_points(set: &PatchSet, ids: &[usize]) -> Vec<(usize, [f64; 3])> {
    ids.iter()
        .flat_map(|&i| set.patches[i].points.iter().map(move |&p| (i, p)))
        .collect()
}

pub fn reconstruct(ckpt: &Path, input: &Path, alpha: f64, out: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(CliError::Usage(format!("--alpha must be in [0, 1), got {alpha}")));
    }
    let model = load_checkpoint(ckpt)?;
    let cfg = config_for(&model, args)?;
    log_config(&cfg);
    let set = generate_patches(&read_window(input)?, &cfg.patch, &mut window_rng(cfg.patch.seed, 0))?;
    let all: Vec<usize> = (0..set.len()).collect();
    create_dir(out)?;
    write_points(&out.join("input.csv"), &patch_points(&set, &all))?;

    let batch = mask_patches(&set, alpha, &mut window_rng(cfg.train.seed, 0))?;
    write_points(&out.join("masked.csv"), &patch_points(&set, &batch.visible_indices))?;
    let mut recon = Vec::new();
    if batch.n_masked() > 0 {
        let pred = model.reconstruct(&batch)?;
        let k = batch.k;
        for (j, &i) in batch.mask_indices.iter().enumerate() {
            let c = set.patches[i].center;
            for r in 0..k {
                let l = &pred.data()[(j * k + r) * 3..(j * k + r) * 3 + 3];
                recon.push((i, [c[0] - l[0], c[1] - l[1], c[2] - l[2]]));
            }
        }
    }
    write_points(&out.join("reconstruction.csv"), &recon)?;
    log::info!(
        "{} patches: {} visible, {} reconstructed",
        set.len(),
        batch.n_visible(),
        batch.n_masked()
    );
    Ok(())
}

pub struct AblateArgs {
    pub methods: Vec<CenterMethod>,
    pub thresholds: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_seed: u64,
    pub train: bool,
    pub accuracy: bool,
}

pub fn ablate(args: AblateArgs, data_dir: &Path, ckpt_dir: &Path, out: Option<&Path>, cfg_args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = cfg_args.resolve()?;
    cfg.sampler.validate()?;
    cfg.patch.validate()?;
    cfg.train.validate()?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must not be empty".into()));
    }
    log_config(&cfg);
    let mut settings = method_settings(&cfg.patch, &args.methods);
    settings.extend(threshold_settings(&cfg.patch, &args.thresholds));
    if settings.is_empty() {
        return Err(CliError::Usage("no methods or thresholds to compare".into()));
    }

    let entries = data::load_dir(data_dir, &cfg.sampler)?;
    let (train, eval): (Vec<_>, Vec<_>) = entries.into_iter().partition(|e| Split::Train.keeps(e.id));
    if train.is_empty() || eval.is_empty() {
        return Err(CliError::Data(format!(
            "need windows in both splits, found {} train and {} held-out",
            train.len(),
            eval.len()
        )));
    }
    let (train_w, eval_w) = (data::windows_only(&train)?, data::windows_only(&eval)?);
    let labels = if args.accuracy {
        Some((data::labels_of(&train)?, data::labels_of(&eval)?))
    } else {
        None
    };
    let n_classes = labels
        .as_ref()
        .and_then(|(a, b)| a.iter().chain(b).max())
        .map_or(cfg.model.n_classes, |m| (m + 1).max(2));
    let plan = AblationPlan {
        model: evmae::ModelConfig {
            n_classes,
            ..cfg.model.clone()
        },
        pretrain: cfg.train.clone(),
        finetune: args.accuracy.then(|| cfg.train.clone()),
        seeds: args.seeds,
        eval_seed: args.eval_seed,
    };
    let data = AblationData {
        train: &train_w,
        eval: &eval_w,
        labels: labels.as_ref().map(|(a, b)| (&a[..], &b[..])),
    };
    let source = if args.train {
        create_dir(ckpt_dir)?;
        ModelSource::Train { save_to: Some(ckpt_dir) }
    } else {
        ModelSource::Load(ckpt_dir)
    };
    log::info!(
        "{} settings x {} seeds, {} train / {} held-out windows",
        settings.len(),
        plan.seeds.len(),
        train_w.len(),
        eval_w.len()
    );
    let rows = run_ablation(&settings, data, &plan, source)?;
    let mut table = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        table.push_str(&r.csv_row());
        table.push('\n');
    }
    match out {
        Some(p) => write_file(p, |f| f.write_all(table.as_bytes())),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
