use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use omrn::data::{generate_synthetic, load_dataset, write_dataset, Dataset, SynthConfig};
use omrn::geometry::{evaluate_by_id, Metrics, PredictionFile};
use omrn::gradcheck::{analytic_gradient, compare, finite_differences, standard_weight_sets};
use omrn::localizer::{LocalizerConfig, LossWeights};
use omrn::model::{infer, ModelConfig, ModelDims, ModelError, ModelParams, SampleInput};
use omrn::params::ParamGroup;
use omrn::training::{init_params, load_checkpoint, save_checkpoint, train, TrainConfig, TrainError};

const TRAIN_LOG: &str = "train_log.txt";
const PREDICTIONS: &str = "predictions.json";
const METRICS: &str = "metrics.json";
const GRADCHECK: &str = "gradcheck.json";

#[derive(Parser, Debug)]
#[command(name = "omrn", version, about = "Spatio-temporal video grounding with a multi-branch relation network")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted ground-truth tubes.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Predict a tube for every sample of a dataset.
    Infer(InferArgs),
    /// Score a prediction file against a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    sentence_len: Option<usize>,
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    feat: Option<usize>,
    #[arg(long)]
    attn: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Candidate widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Loss weights for the spatial, temporal, regression and diversity terms.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    radius: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    /// Suppress the per-step log on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// Double the analytic gradient of this parameter before comparing.
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    words: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    synth: SynthConfig,
    model: ModelConfig,
    train: TrainConfig,
    gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckConfig {
    tolerance: f64,
    step: f64,
    frames: usize,
    regions: usize,
    objects: usize,
    words: usize,
    dim: usize,
    hidden: usize,
    widths: Vec<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            frames: 6,
            regions: 4,
            objects: 3,
            words: 8,
            dim: 16,
            hidden: 16,
            widths: vec![3, 5, 7],
        }
    }
}

/// An error together with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::NonFinite(_) => runtime(e),
        _ => invalid(e),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFiniteLoss { .. } => runtime(e),
        TrainError::Step {
            source: ModelError::NonFinite(_),
            ..
        } => runtime(e),
        _ => invalid(e),
    }
}

/// `%g`-style formatting with six significant digits.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.5e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{mantissa}e{e}")
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(invalid)?;
            serde_json::from_str::<FileConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(invalid)?
        }
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed);
    let out = cli.out.clone().or(file.out.clone());
    match cli.command {
        Command::Gen(args) => cmd_gen(args, file, seed, out),
        Command::Train(args) => cmd_train(args, file, seed, out),
        Command::Infer(args) => cmd_infer(args, out),
        Command::Eval(args) => cmd_eval(args, out),
        Command::Gradcheck(args) => cmd_gradcheck(args, file, seed, out),
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    out.ok_or_else(|| invalid(anyhow!("--out is required")))
}

fn cmd_gen(a: GenArgs, file: FileConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    let mut cfg = file.synth;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { cfg.$field = v; })* };
    }
    set!(samples => num_samples, frames => frames, regions => regions, objects => objects,
         feature_dim => feature_dim, word_dim => word_dim, classes => num_classes, noise => noise_std);
    if a.sentence_len.is_some() {
        cfg.sentence_len = a.sentence_len;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let set = generate_synthetic(&cfg).map_err(invalid)?;
    write_dataset(&out, "synthetic", &set.samples, Some(&set.object_classes)).map_err(runtime)?;
    println!("wrote {} samples to {}", set.samples.len(), out.display());
    Ok(())
}

fn apply_model_args(cfg: &mut ModelConfig, a: &ModelArgs) -> Result<(), Failure> {
    if let Some(v) = a.feat {
        cfg.dims.feat = v;
    }
    if let Some(v) = a.attn {
        cfg.dims.attn = v;
    }
    if let Some(v) = a.hidden {
        cfg.dims.hidden = v;
    }
    if let Some(v) = &a.widths {
        cfg.localizer.widths = v.clone();
    }
    if let Some(v) = &a.lambdas {
        let w: [f64; 4] = v
            .as_slice()
            .try_into()
            .map_err(|_| invalid(anyhow!("--lambdas takes exactly four values, got {}", v.len())))?;
        cfg.localizer.weights = LossWeights::from_array(w);
    }
    if let Some(v) = a.alpha {
        cfg.aggregation.alpha = v;
    }
    if let Some(v) = a.radius {
        cfg.aggregation.radius = v;
    }
    Ok(())
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(invalid)
}

fn inputs(dataset: &Dataset, cfg: &ModelConfig) -> Result<Vec<SampleInput<f32>>, Failure> {
    dataset
        .samples
        .iter()
        .map(|s| SampleInput::new(s, cfg).map(|i| i.cast()).map_err(model_failure))
        .collect()
}

fn cmd_train(a: TrainArgs, file: FileConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    let mut model = file.model;
    apply_model_args(&mut model, &a.model)?;
    let mut tc = file.train;
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr = v;
    }
    if let Some(v) = a.init_scale {
        tc.init_scale = v;
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    let dataset = load(&a.data)?;
    model.dims.region_dim = dataset.manifest.dims.region_dim;
    model.dims.word_dim = dataset.manifest.dims.word_dim;
    model.validate().map_err(invalid)?;
    tc.validate().map_err(invalid)?;
    let inputs = inputs(&dataset, &model)?;

    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .map_err(runtime)?;
    let header = "# step L_s L_t L_r L_d total";
    writeln!(log, "{header}").map_err(runtime)?;
    if !a.quiet {
        println!("{header}");
    }
    let mut write_err = None;
    let template = ModelParams::<f32>::zeros(&model.dims, model.localizer.widths.len());
    let init = init_params(&template, tc.seed, tc.init_scale);
    let outcome = train(&inputs, &model, &tc, init, |r| {
        let l = &r.losses;
        let line = format!(
            "{} {} {} {} {} {}",
            r.step,
            sig6(l.spatial),
            sig6(l.temporal),
            sig6(l.regression),
            sig6(l.diversity),
            sig6(r.total)
        );
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
        if !a.quiet {
            println!("{line}");
        }
    })
    .map_err(train_failure)?;
    if let Some(e) = write_err {
        return Err(runtime(anyhow::Error::new(e).context(format!("writing {}", log_path.display()))));
    }
    save_checkpoint(&out, &outcome.params, &model, tc.seed, tc.steps).map_err(runtime)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_infer(a: InferArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    let (header, params) = load_checkpoint(&a.checkpoint).map_err(train_failure)?;
    let dataset = load(&a.data)?;
    let inputs = inputs(&dataset, &header.model)?;
    let mut predictions = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let p = infer(input, &params, &header.model.localizer).map_err(model_failure)?;
        predictions.push(p.to_record(&input.id));
    }
    let file = PredictionFile { predictions };
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    let path = out.join(PREDICTIONS);
    let json = serde_json::to_string_pretty(&file).map_err(runtime)? + "\n";
    fs::write(&path, json)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    println!("wrote {} predictions to {}", file.predictions.len(), path.display());
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("samples {}", m.count);
    println!("m_tIoU {}", sig6(m.m_tiou));
    println!("m_vIoU {}", sig6(m.m_viou));
    println!("vIoU@0.3 {}", sig6(m.viou_at_03));
    println!("vIoU@0.5 {}", sig6(m.viou_at_05));
}

fn cmd_eval(a: EvalArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.predictions)
        .with_context(|| format!("reading {}", a.predictions.display()))
        .map_err(invalid)?;
    let preds: PredictionFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.predictions.display()))
        .map_err(invalid)?;
    let dataset = load(&a.data)?;
    let gts: Vec<_> = dataset.samples.iter().map(|s| (s.id.clone(), s.gt_tube())).collect();
    let metrics = evaluate_by_id(&preds.predictions, &gts).map_err(invalid)?;
    print_metrics(&metrics);
    let json = serde_json::to_string_pretty(&metrics).map_err(runtime)? + "\n";
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(runtime)?;
            let path = dir.join(METRICS);
            fs::write(&path, json)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(runtime)?;
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, file: FileConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut g = file.gradcheck;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { g.$field = v; })* };
    }
    set!(tolerance, step, frames, regions, objects, words, dim, hidden);
    if let Some(w) = a.widths {
        g.widths = w;
    }
    let seed = seed.unwrap_or(1);
    let synth = SynthConfig {
        num_samples: 1,
        frames: g.frames,
        regions: g.regions,
        objects: g.objects,
        feature_dim: g.dim,
        word_dim: g.dim,
        num_classes: g.objects + 4,
        sentence_len: Some(g.words),
        noise_std: 0.1,
        seed,
    };
    let set = generate_synthetic(&synth).map_err(invalid)?;
    let model = ModelConfig {
        dims: ModelDims {
            region_dim: g.dim,
            word_dim: g.dim,
            feat: g.dim,
            attn: g.dim,
            hidden: g.hidden,
        },
        localizer: LocalizerConfig {
            widths: g.widths.clone(),
            ..file.model.localizer
        },
        aggregation: file.model.aggregation,
    };
    model.validate().map_err(invalid)?;
    let input = SampleInput::new(&set.samples[0], &model).map_err(model_failure)?;
    let params = init_params(&ModelParams::<f64>::zeros(&model.dims, g.widths.len()), seed, 1.0);
    if let Some(name) = &a.corrupt {
        if !params.named().iter().any(|(n, _)| n == name) {
            return Err(invalid(anyhow!("no parameter named `{name}`")));
        }
    }
    let numeric = finite_differences(&input, &params, &model.localizer, g.step).map_err(model_failure)?;
    let mut reports = Vec::new();
    for w in standard_weight_sets(&model.localizer.weights) {
        let (_, mut grads) = analytic_gradient(&input, &params, &model.localizer, &w).map_err(model_failure)?;
        if let Some(name) = &a.corrupt {
            grads.for_each_mut("", &mut |n, t| {
                if n == name {
                    t.scale(2.0);
                }
            });
        }
        reports.push(compare(&grads, &numeric, &w, g.tolerance));
    }
    let mut ok = true;
    for r in &reports {
        let w = r.weights.to_array().map(sig6).join(",");
        let worst = r.worst().expect("non-empty registry");
        println!(
            "weights [{w}] {} worst {} {}",
            if r.passed() { "PASS" } else { "FAIL" },
            worst.name,
            sig6(worst.max_rel_error)
        );
        for f in r.failures() {
            println!(
                "  {} max_rel_error {} max_abs_grad {}",
                f.name,
                sig6(f.max_rel_error),
                sig6(f.max_abs_grad)
            );
        }
        ok &= r.passed();
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        let path = dir.join(GRADCHECK);
        let json = serde_json::to_string_pretty(&reports).map_err(runtime)? + "\n";
        fs::write(&path, json)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
    }
    if ok {
        Ok(())
    } else {
        Err(runtime(anyhow!("gradient check failed at tolerance {}", sig6(g.tolerance))))
    }
}

#[cfg(test)]
mod tests {
    use super::sig6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(std::f64::consts::LN_2), "0.693147");
        assert_eq!(sig6(7.003), "7.003");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(-0.000123456789), "-0.000123457");
        assert_eq!(sig6(1.5e-9), "1.5e-9");
        assert_eq!(sig6(12345.67), "12345.7");
    }
}
