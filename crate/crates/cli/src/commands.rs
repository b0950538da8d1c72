use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use zsih::data::features::class_names_to_text;
use zsih::data::{
    load_features, load_semantics, make_split, synth_dataset, write_features, write_semantics,
    FeatureStore, Modality, SynthParams, ZeroShotSplit,
};
use zsih::pipeline::{
    encode_codes, evaluate_zero_shot, load_checkpoint, metrics_line, write_checkpoint, FusionMode,
    StopReason, Trainer, TrainingSet, ZsihConfig,
};
use zsih::retrieval::{evaluate, hamming_distance, hamming_rank, load_codes, write_codes};

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "zsih", version, about = "Zero-shot sketch-image hashing")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    Synth(SynthArgs),
    /// Draw a seen/unseen class split and partition the feature files.
    Split(SplitArgs),
    /// Train on seen classes.
    Train(TrainArgs),
    /// Binary codes for a feature file, using one modality's encoder.
    Encode(EncodeArgs),
    /// Print the Hamming ranking of one query.
    Retrieve(RetrieveArgs),
    /// Score sketch queries against an image gallery.
    Eval(EvalArgs),
    /// Sweep fusion mode, graph convolution and bandwidth.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    classes: u32,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    per_class: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    locations: u32,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    channels: u32,
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    semantic_dim: u32,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Sketch feature file (ZSFT).
    #[arg(long)]
    sketches: PathBuf,
    /// Image feature file (ZSFT).
    #[arg(long)]
    images: PathBuf,
    /// Class-name file, `id<TAB>name` per line.
    #[arg(long)]
    names: PathBuf,
}

impl DataArgs {
    fn paths(&self) -> [&Path; 3] {
        [&self.sketches, &self.images, &self.names]
    }

    fn load(&self) -> Result<FeatureStore> {
        FeatureStore::load(&self.sketches, &self.images, &self.names).context("loading features")
    }
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    unseen: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Dedicated flags win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Code length M.
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// kronecker, concat or mfb.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Replace graph convolution with plain dense layers.
    #[arg(long)]
    no_gcn: bool,
    /// Adjacency bandwidth t.
    #[arg(long)]
    bandwidth: Option<f64>,
}

fn config_has_seed(text: &str) -> bool {
    text.lines().any(|l| {
        l.split('#')
            .next()
            .and_then(|l| l.split_once('='))
            .is_some_and(|(k, _)| k.trim() == "seed")
    })
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ZsihConfig> {
        let mut seeded = self.seed.is_some();
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                seeded |= config_has_seed(&text);
                ZsihConfig::parse_text(&text).with_context(|| format!("config {}", path.display()))?
            }
            None => ZsihConfig::default(),
        };
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("override {kv:?} is not KEY=VALUE")))?;
            let key = key.trim();
            cfg.set(key, value).map_err(|e| usage(e.to_string()))?;
            seeded |= key == "seed";
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.bits {
            cfg.code_bits = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion_mode = v;
        }
        if self.no_gcn {
            cfg.use_gcn = false;
        }
        if let Some(v) = self.bandwidth {
            cfg.bandwidth = v;
        }
        if !seeded {
            return Err(usage("no seed given: pass --seed or set seed in the config"));
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Word-vector text file, `name v1 .. vd` per line.
    #[arg(long)]
    semantics: PathBuf,
    /// Optional `missing<TAB>substitute` file.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long)]
    split: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log; defaults to the checkpoint path with `.metrics.tsv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Expected modality of the feature file: sketch or image.
    #[arg(long)]
    modality: Modality,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Row of the query code file.
    #[arg(long, default_value_t = 0)]
    query: usize,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Sketch code file.
    #[arg(long)]
    queries: PathBuf,
    /// Image code file.
    #[arg(long)]
    gallery: PathBuf,
    /// Cutoffs for precision@K; repeatable. Defaults to 100.
    #[arg(long = "k", value_parser = clap::value_parser!(u64).range(1..))]
    ks: Vec<u64>,
    /// Report file; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tab-separated precision-recall points.
    #[arg(long)]
    pr_dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Full dataset; the split decides what is trained on and what is scored.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    semantics: PathBuf,
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long)]
    split: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Results table; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            bail!("input file {} does not exist", p.display());
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = a.seed.ok_or_else(|| usage("synth needs --seed"))?;
    if !a.noise.is_finite() || a.noise < 0.0 {
        return Err(usage(format!("--noise must be nonnegative, got {}", a.noise)));
    }
    let params = SynthParams {
        n_classes: a.classes as usize,
        per_class: a.per_class as usize,
        locations: a.locations as usize,
        channels: a.channels as usize,
        semantic_dim: a.semantic_dim as usize,
        noise: a.noise,
        seed,
        ..Default::default()
    };
    let syn = synth_dataset(&params)?;
    create_dir(&a.out_dir)?;
    let names = &syn.store.class_names;
    write_features(a.out_dir.join("sketches.zsft"), &syn.store.sketches)?;
    write_features(a.out_dir.join("images.zsft"), &syn.store.images)?;
    fs::write(a.out_dir.join("classes.txt"), class_names_to_text(names))?;
    write_semantics(a.out_dir.join("semantics.txt"), &syn.semantics, names)?;
    println!(
        "classes\t{}\nsketches\t{}\nimages\t{}\nlocations\t{}\nchannels\t{}\nsemantic_dim\t{}",
        names.len(),
        syn.store.sketches.len(),
        syn.store.images.len(),
        params.locations,
        params.channels,
        params.semantic_dim
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let seed = a.seed.ok_or_else(|| usage("split needs --seed"))?;
    require_files(&a.data.paths())?;
    let store = a.data.load()?;
    let classes = store.class_ids();
    if a.unseen as usize >= classes.len() {
        return Err(usage(format!(
            "--unseen {} leaves no seen class out of {}",
            a.unseen,
            classes.len()
        )));
    }
    let split = make_split(&classes, a.unseen as usize, seed)?;
    create_dir(&a.out_dir)?;
    fs::write(a.out_dir.join("split.txt"), split.to_text())?;
    for (prefix, set) in [("seen", &split.seen), ("unseen", &split.unseen)] {
        let keep = |c: u32| set.contains(&c);
        write_features(
            a.out_dir.join(format!("{prefix}_sketches.zsft")),
            &store.sketches.filter_classes(keep),
        )?;
        write_features(
            a.out_dir.join(format!("{prefix}_images.zsft")),
            &store.images.filter_classes(keep),
        )?;
    }
    println!("seen\t{}\nunseen\t{}", split.seen.len(), split.unseen.len());
    Ok(())
}

fn load_split(path: &Path) -> Result<ZeroShotSplit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ZeroShotSplit::parse_text(&text)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let mut inputs = a.data.paths().to_vec();
    inputs.extend([a.semantics.as_path(), a.split.as_path()]);
    inputs.extend(a.synonyms.as_deref());
    require_files(&inputs)?;

    let store = a.data.load()?;
    let split = load_split(&a.split)?;
    let semantics = load_semantics(&a.semantics, &store.class_names, a.synonyms.as_deref())?;
    let set = TrainingSet::new(&store, &semantics, &split)?;

    let metrics_path = a
        .metrics
        .unwrap_or_else(|| a.out.with_extension("metrics.tsv"));
    let mut log = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let mut trainer = Trainer::new(cfg, set)?;
    let mut io_err = None;
    let stop = trainer.run(|iter, loss| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{}", metrics_line(iter, loss)) {
                io_err = Some(e);
            }
        }
        if iter % 500 == 0 {
            info!("iter {iter}: loss {}", loss.total);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing metrics log");
    }
    log.flush()?;
    let ckpt = trainer.into_checkpoint();
    write_checkpoint(&a.out, &ckpt).with_context(|| format!("writing {}", a.out.display()))?;
    println!("iterations\t{}\nstop\t{stop}", ckpt.iteration);
    if let StopReason::NonFinite(what) = stop {
        bail!("training stopped on non-finite {what}; last good state written");
    }
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    require_files(&[&a.checkpoint, &a.features])?;
    let ckpt = load_checkpoint(&a.checkpoint).context("loading checkpoint")?;
    let set = load_features(&a.features).context("loading features")?;
    if set.modality != a.modality {
        bail!(
            "{} holds {} features but --modality is {}",
            a.features.display(),
            set.modality,
            a.modality
        );
    }
    let codes = encode_codes(&ckpt.params, &set)?;
    write_codes(&a.out, &codes).with_context(|| format!("writing {}", a.out.display()))?;
    println!("codes\t{}\nbits\t{}\nmodality\t{}", codes.len(), codes.bits(), codes.modality);
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    require_files(&[&a.queries, &a.gallery])?;
    let queries = load_codes(&a.queries)?;
    let gallery = load_codes(&a.gallery)?;
    if a.query >= queries.len() {
        return Err(usage(format!("--query {} but the file has {} codes", a.query, queries.len())));
    }
    if queries.bits() != gallery.bits() {
        bail!("query codes have M={}, gallery codes have M={}", queries.bits(), gallery.bits());
    }
    let q = queries.code(a.query);
    let order = hamming_rank(q, &gallery)?;
    println!("rank\tindex\tlabel\tdistance");
    for (rank, &i) in order.iter().take(a.top).enumerate() {
        println!(
            "{}\t{i}\t{}\t{}",
            rank + 1,
            gallery.labels[i],
            hamming_distance(q, gallery.code(i))
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_files(&[&a.queries, &a.gallery])?;
    let queries = load_codes(&a.queries).context("loading query codes")?;
    let gallery = load_codes(&a.gallery).context("loading gallery codes")?;
    let ks: Vec<usize> = if a.ks.is_empty() {
        vec![100]
    } else {
        a.ks.iter().map(|&k| k as usize).collect()
    };
    let report = evaluate(&queries, &gallery, &ks)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    if let Some(out) = &a.pr_dump {
        fs::write(out, report.pr_dump()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let mut inputs = a.data.paths().to_vec();
    inputs.extend([a.semantics.as_path(), a.split.as_path()]);
    inputs.extend(a.synonyms.as_deref());
    require_files(&inputs)?;

    let store = a.data.load()?;
    let split = load_split(&a.split)?;
    let semantics = load_semantics(&a.semantics, &store.class_names, a.synonyms.as_deref())?;
    let seen = |c: u32| split.seen.contains(&c);
    let unseen = |c: u32| split.unseen.contains(&c);
    let train_store = FeatureStore::new(
        store.sketches.filter_classes(seen),
        store.images.filter_classes(seen),
        store.class_names.clone(),
    )?;
    let set = TrainingSet::new(&train_store, &semantics, &split)?;
    let test_sketches = store.sketches.filter_classes(unseen);
    let test_images = store.images.filter_classes(unseen);

    let mut settings: Vec<(String, ZsihConfig)> = vec![("full".into(), base.clone())];
    for mode in [FusionMode::Kronecker, FusionMode::Concat, FusionMode::Mfb] {
        settings.push((format!("fusion_mode={mode}"), ZsihConfig { fusion_mode: mode, ..base.clone() }));
    }
    settings.push(("use_gcn=false".into(), ZsihConfig { use_gcn: false, ..base.clone() }));
    for t in [1.0, 0.1, 1e-6] {
        settings.push((format!("t={t}"), ZsihConfig { bandwidth: t, ..base.clone() }));
    }

    let mut table = String::from("setting\tmAP@all\n");
    for (name, cfg) in settings {
        let mut trainer = Trainer::new(cfg, set.clone())?;
        let stop = trainer.run(|_, _| {})?;
        let report = evaluate_zero_shot(&trainer.checkpoint().params, &test_sketches, &test_images, &[100])?;
        info!("{name}: {stop}");
        let line = format!("{name}\t{}\n", report.map_all);
        print!("{line}");
        table.push_str(&line);
    }
    if let Some(out) = &a.out {
        fs::write(out, table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
