//! Command-line entry point: corpus synthesis, training, inference,
//! evaluation, the low-pass-filter certificate, gradient checks and
//! feature dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfafnet::checkpoint::load_model;
use sfafnet::data::{load_dataset, read_ppm, write_corpus, write_ppm, BlurKind};
use sfafnet::error::{Error, Result};
use sfafnet::fdgm::{lowpass_ratio_trajectory, random_row_softmax};
use sfafnet::loss::{mae, psnr, ssim};
use sfafnet::network::{ArchConfig, FilterMode, Model};
use sfafnet::tensor::{normal_sample, Scalar};
use sfafnet::trace::Trace;
use sfafnet::trainer::{infer_image, train, AdamState, TrainConfig};

#[derive(Parser)]
#[command(name = "sfafnet", version, about = "Spatial-frequency adaptive fusion deblurring", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic blur corpus under OUT/{train,test}.
    SynthData(SynthArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a test directory, CSV per image.
    Eval(EvalArgs),
    /// Certify the low-pass property of random row-softmax matrices.
    VerifyTheorem(VerifyArgs),
    /// Finite-difference gradient checks (optionally one module).
    Gradcheck(GradcheckArgs),
    /// Dump intermediate feature maps as flat binaries + JSON sidecars.
    DumpFeatures(DumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Degradation: gaussian:SIGMA or motion:LENGTH:ANGLE.
    #[arg(long, default_value = "gaussian:1.5", value_parser = parse_blur)]
    blur: BlurKind,
    /// Additive Gaussian noise stddev after blurring.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root containing train/ (and optionally test/) subdirectories,
    /// or a flat directory of blur/sharp pairs.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    naf_blocks: usize,
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the learned filters with a fixed bank: gaussian:SIGMA.
    #[arg(long, value_parser = parse_filter)]
    filter: Option<FilterMode>,
    /// Resume from an existing checkpoint (architecture flags are ignored).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// CSV log path (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 2e-4)]
    lr_init: f64,
    #[arg(long, default_value_t = 1e-6)]
    lr_final: f64,
    #[arg(long, default_value_t = 200)]
    val_every: usize,
    #[arg(long, default_value_t = 500)]
    save_every: usize,
    /// Global-norm gradient clipping threshold.
    #[arg(long)]
    clip: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of blur/sharp pairs (a test/ subdirectory is preferred).
    #[arg(long)]
    data: PathBuf,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Filter kernel size; matrices are k²×k².
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 64)]
    max_p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to checks whose module or name contains this string.
    #[arg(long)]
    module: Option<String>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_blur(s: &str) -> std::result::Result<BlurKind, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["gaussian", sigma] => sigma
            .parse()
            .map(|sigma| BlurKind::Gaussian { sigma })
            .map_err(|_| format!("bad sigma in `{s}`")),
        ["motion", length, angle] => match (length.parse(), angle.parse()) {
            (Ok(length), Ok(angle)) => Ok(BlurKind::LinearMotion { length, angle }),
            _ => Err(format!("bad motion spec `{s}`")),
        },
        _ => Err(format!("expected gaussian:SIGMA or motion:LENGTH:ANGLE, got `{s}`")),
    }
}

fn parse_filter(s: &str) -> std::result::Result<FilterMode, String> {
    match s.split_once(':') {
        Some(("gaussian", sigma)) => sigma
            .parse()
            .map(|sigma| FilterMode::Gaussian { sigma })
            .map_err(|_| format!("bad sigma in `{s}`")),
        _ if s == "learned" => Ok(FilterMode::Learned),
        _ => Err(format!("expected learned or gaussian:SIGMA, got `{s}`")),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::VerifyTheorem(a) => cmd_verify(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::DumpFeatures(a) => cmd_dump(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let corpus = write_corpus(&a.out, a.count, a.seed, a.blur, a.noise, a.size)?;
    eprintln!(
        "wrote {} train and {} test pairs ({}x{} px) under {}",
        corpus.train_count,
        corpus.test_count,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

/// Resolve a corpus root into (train, val) pair lists.
fn split_dataset(root: &Path) -> Result<(Vec<sfafnet::data::ImagePair>, Vec<sfafnet::data::ImagePair>)> {
    let train_dir = root.join("train");
    if train_dir.is_dir() {
        let train = load_dataset(&train_dir)?;
        let test_dir = root.join("test");
        let val = if test_dir.is_dir() { load_dataset(&test_dir)? } else { Vec::new() };
        Ok((train, val))
    } else {
        Ok((load_dataset(root)?, Vec::new()))
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (train_set, val_set) = split_dataset(&a.data)?;
    let (model, mut state) = match &a.resume {
        Some(ckpt) => {
            let (model, leftovers) = load_model::<f32>(ckpt)?;
            let params = model.named_params();
            let state = AdamState::from_records(&params, &leftovers)?;
            eprintln!("resuming from {} at step {}", ckpt.display(), state.t);
            (model, state)
        }
        None => {
            let cfg = ArchConfig {
                base_channels: a.channels,
                naf_blocks: a.naf_blocks,
                rows: a.rows,
                kernel: a.kernel,
                filter: a.filter.unwrap_or_default(),
            };
            let model = Model::<f32>::new(&cfg, a.seed)?;
            let state = AdamState::new(&model.named_params());
            (model, state)
        }
    };
    let cfg = TrainConfig {
        lr_init: a.lr_init,
        lr_final: a.lr_final,
        batch_size: a.batch,
        total_steps: a.steps,
        seed: a.seed,
        patch_size: a.patch,
        clip_grad: a.clip,
        val_every: a.val_every,
        save_every: a.save_every,
        ..TrainConfig::default()
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".log.csv");
        a.out.with_file_name(name)
    });
    eprintln!(
        "training {} params for {} steps ({} train / {} val images)",
        model.num_params(),
        cfg.total_steps,
        train_set.len(),
        val_set.len()
    );
    let t0 = std::time::Instant::now();
    let report = train(&model, &mut state, &train_set, &val_set, &cfg, &a.out, Some(&log_path))?;
    eprintln!(
        "done: {} steps in {:.1}s, final loss {:.5}{}; checkpoint {}",
        report.steps_run,
        t0.elapsed().as_secs_f64(),
        report.final_loss,
        report
            .final_val_psnr
            .map_or(String::new(), |p| format!(", val psnr {p:.2} dB")),
        report.checkpoint.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (model, _) = load_model::<f32>(&a.ckpt)?;
    let img = read_ppm(&a.input)?;
    let restored = infer_image(&model, &img)?;
    write_ppm(&a.out, &restored)?;
    eprintln!("restored {} -> {}", a.input.display(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_model::<f32>(&a.ckpt)?;
    let dir = if a.data.join("test").is_dir() {
        a.data.join("test")
    } else {
        a.data.clone()
    };
    let pairs = load_dataset(&dir)?;
    let mut csv = String::from("image_id,psnr,ssim,mae\n");
    let (mut p_acc, mut s_acc, mut m_acc) = (0.0, 0.0, 0.0);
    for pair in &pairs {
        let restored = infer_image(&model, &pair.degraded)?;
        let p = psnr(&restored.data, &pair.sharp.data, 1.0);
        let s = ssim(&restored.data, &pair.sharp.data, 3, restored.h, restored.w)?;
        let m = mae(&restored.data, &pair.sharp.data);
        p_acc += p;
        s_acc += s;
        m_acc += m;
        csv.push_str(&format!("{},{p:.4},{s:.5},{m:.6}\n", pair.id));
    }
    let n = pairs.len() as f64;
    match &a.csv {
        Some(path) => fs::write(path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?,
        None => print!("{csv}"),
    }
    eprintln!(
        "{} images: mean psnr {:.2} dB, mean ssim {:.4}, mean mae {:.5}",
        pairs.len(),
        p_acc / n,
        s_acc / n,
        m_acc / n
    );
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    if a.k == 0 || a.k % 2 == 0 {
        return Err(Error::config(format!("k must be odd and positive, got {}", a.k)));
    }
    if a.max_p == 0 || a.trials == 0 {
        return Err(Error::config("trials and max-p must be >= 1".to_string()));
    }
    let d = a.k * a.k;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut csv = String::from("trial,p,ratio\n");
    let mut final_ratios = Vec::with_capacity(a.trials);
    for trial in 0..a.trials {
        let w = random_row_softmax(&mut rng, d);
        let mut m: Vec<f64> = (0..d).map(|_| normal_sample(&mut rng)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        m.iter_mut().for_each(|v| *v /= norm);
        let traj = lowpass_ratio_trajectory(&w, &m, d, a.max_p)?;
        for (i, ratio) in traj.iter().enumerate() {
            csv.push_str(&format!("{trial},{},{ratio:.6e}\n", i + 1));
        }
        final_ratios.push(*traj.last().unwrap());
    }
    match &a.csv {
        Some(path) => fs::write(path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?,
        None => print!("{csv}"),
    }
    let worst = final_ratios.iter().cloned().fold(0.0f64, f64::max);
    let passed = final_ratios.iter().filter(|r| **r < 1e-3).count();
    eprintln!(
        "{passed}/{} trials below 1e-3 at p={}; worst final ratio {worst:.3e}",
        a.trials, a.max_p
    );
    if passed != a.trials {
        return Err(Error::Degenerate(format!(
            "{} of {} trials kept high-frequency energy above 1e-3",
            a.trials - passed,
            a.trials
        )));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = sfafnet::gradcheck::run_suite(a.module.as_deref())?;
    if results.is_empty() {
        return Err(Error::config(format!(
            "no gradient checks match `{}`",
            a.module.unwrap_or_default()
        )));
    }
    let mut all_pass = true;
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        all_pass &= r.pass;
        writeln!(
            stdout,
            "{} {}/{}: {} coords, max rel err {:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.module,
            r.name,
            r.checked,
            r.max_rel_err
        )
        .map_err(|e| Error::io("stdout", e))?;
    }
    if !all_pass {
        return Err(Error::Degenerate("gradient checks failed".to_string()));
    }
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let (model, _) = load_model::<f32>(&a.ckpt)?;
    let img = read_ppm(&a.input)?;
    if img.h % 4 != 0 || img.w % 4 != 0 {
        return Err(Error::dim(format!(
            "dump-features needs sizes divisible by 4, got {}x{}",
            img.h, img.w
        )));
    }
    let data: Vec<f32> = img.data.clone();
    let input = sfafnet::Tensor::<f32>::from_vec(data, &[1, 3, img.h, img.w])?;
    let mut trace = Trace::new();
    sfafnet::tensor::no_grad(|| model.forward_traced(&input, Some(&mut trace)))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    for item in &trace.items {
        let bin_path = a.out.join(format!("{}.bin", item.name));
        let mut bytes = Vec::with_capacity(item.data.len() * 4);
        for v in &item.data {
            v.write_le(&mut bytes);
        }
        fs::write(&bin_path, bytes).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        let json_path = a.out.join(format!("{}.json", item.name));
        let sidecar = serde_json::json!({ "shape": item.shape, "dtype": "f32" });
        fs::write(&json_path, sidecar.to_string())
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    }
    eprintln!("wrote {} feature maps to {}", trace.items.len(), a.out.display());
    Ok(())
}
