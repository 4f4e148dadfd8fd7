use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use queeng::io::{
    load_cube, load_pgm8, overlay, save_checkpoint, save_cube, save_pgm16, save_pgm8,
    synth_generate, SyntheticSpec,
};
use queeng::metrics::{metrics, ConfusionCounts};
use queeng::preprocess::{sam_map, slic, LdaModel};
use queeng::quantum::{compose_unitary, CircuitSpec, Topology};
use queeng::train::{detect, history_csv, stack_bands, train, TrainConfig};
use queeng::{Error, Result};

#[derive(Parser)]
#[command(name = "queeng", version, about = "Quantum-enhanced graph network for hyperspectral change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bitemporal scene pair with ground truth
    Synth(SynthArgs),
    /// Compute the SAM map and SLIC superpixel segmentation for a scene pair
    Preprocess(PreprocessArgs),
    /// Train a model on a labeled scene pair
    Train(TrainArgs),
    /// Produce a binary change map from a trained model
    Detect(DetectArgs),
    /// Score a change map against ground truth
    Eval(EvalArgs),
    /// Print the composed circuit unitary for given parameters
    CircuitDump(CircuitDumpArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    endmembers: usize,
    #[arg(long, default_value_t = 3)]
    blobs: usize,
    #[arg(long, default_value_t = 0.005)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_x1: PathBuf,
    #[arg(long)]
    out_x2: PathBuf,
    #[arg(long)]
    out_gt: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    x1: PathBuf,
    #[arg(long)]
    x2: PathBuf,
    /// Ground-truth mask used to fit the LDA projection
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 20)]
    slic_scale: usize,
    /// Superpixel label map, 16-bit PGM
    #[arg(long)]
    out_labels: PathBuf,
    /// SAM map rescaled to 8-bit, optional
    #[arg(long)]
    out_sam: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    x1: PathBuf,
    #[arg(long)]
    x2: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// JSON file mirroring TrainConfig; missing keys take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metric history CSV path (default: <out>.csv)
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    x1: PathBuf,
    #[arg(long)]
    x2: PathBuf,
    #[arg(long)]
    out_map: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// TP/TN/FP/FN overlay PGM, optional
    #[arg(long)]
    out_overlay: Option<PathBuf>,
}

#[derive(Args)]
struct CircuitDumpArgs {
    #[arg(long, default_value_t = 4)]
    qubits: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Comma-separated circuit parameters; defaults to all zeros
    #[arg(long)]
    params: Option<String>,
    /// XX coupling topology: ring (default, matches the model) or chain
    #[arg(long, default_value = "ring")]
    topology: String,
}

fn load_mask(path: &PathBuf, h: usize, w: usize) -> Result<Vec<u8>> {
    let (mh, mw, pixels) = load_pgm8(path)?;
    if mh != h || mw != w {
        return Err(Error::Format(format!(
            "mask {}x{} does not match cube {}x{}",
            mh, mw, h, w
        )));
    }
    Ok(pixels)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                height: a.height,
                width: a.width,
                bands: a.bands,
                endmembers: a.endmembers,
                blobs: a.blobs,
                sigma: a.sigma,
                seed: a.seed,
            };
            let (x1, x2, gt) = synth_generate(&spec)?;
            save_cube(&a.out_x1, &x1)?;
            save_cube(&a.out_x2, &x2)?;
            save_pgm8(&a.out_gt, spec.height, spec.width, &gt)?;
            let changed = gt.iter().filter(|&&v| v != 0).count();
            println!(
                "synth: {}x{}x{} seed {} ({} changed pixels)",
                spec.height, spec.width, spec.bands, spec.seed, changed
            );
        }
        Command::Preprocess(a) => {
            let x1 = load_cube(&a.x1)?;
            let x2 = load_cube(&a.x2)?;
            if (x1.height, x1.width, x1.bands) != (x2.height, x2.width, x2.bands) {
                return Err(Error::Format("x1/x2 shape mismatch".into()));
            }
            let (h, w) = (x1.height, x1.width);
            let gt = load_mask(&a.gt, h, w)?;
            let labeled: Vec<(usize, usize)> =
                gt.iter().enumerate().map(|(p, &v)| (p, (v != 0) as usize)).collect();
            let stacked = stack_bands(&x1.data, &x2.data);
            let lda = LdaModel::fit(&stacked, &labeled)?;
            let feature = lda.project(&stacked)?;
            let graph = slic(&feature, h, w, a.slic_scale)?;
            let labels16: Vec<u16> = graph.labels.iter().map(|&l| l as u16).collect();
            save_pgm16(&a.out_labels, h, w, &labels16)?;
            if let Some(path) = &a.out_sam {
                let (z, _) = sam_map(&x1.data, &x2.data)?;
                let max = z.data().iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
                let scaled: Vec<u8> =
                    z.data().iter().map(|&v| (v / max * 255.0).round() as u8).collect();
                save_pgm8(path, h, w, &scaled)?;
            }
            println!("preprocess: {} superpixels (scale {})", graph.k, a.slic_scale);
        }
        Command::Train(a) => {
            let cfg: TrainConfig = match &a.config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            cfg.validate()?;
            let x1 = load_cube(&a.x1)?;
            let x2 = load_cube(&a.x2)?;
            let gt = load_mask(&a.gt, x1.height, x1.width)?;
            let outcome = train(&x1, &x2, &gt, &cfg)?;
            save_checkpoint(&a.out, &outcome.params, &outcome.lda, cfg.slic_scale)?;
            let history_path = a.history.unwrap_or_else(|| {
                let mut p = a.out.as_os_str().to_owned();
                p.push(".csv");
                PathBuf::from(p)
            });
            std::fs::write(&history_path, history_csv(&outcome.history))?;
            println!(
                "train: best epoch {}, test OA {:.4} kappa {:.4} F1 {:.4}",
                outcome.best_epoch, outcome.test.oa, outcome.test.kappa, outcome.test.f1
            );
        }
        Command::Detect(a) => {
            let ckpt = queeng::io::load_checkpoint(&a.model)?;
            let mut params = ckpt.params;
            let x1 = load_cube(&a.x1)?;
            let x2 = load_cube(&a.x2)?;
            let map = detect(&mut params, &x1, &x2, &ckpt.lda, ckpt.slic_scale)?;
            save_pgm8(&a.out_map, x1.height, x1.width, &map)?;
            let changed = map.iter().filter(|&&v| v != 0).count();
            println!("detect: {} changed pixels of {}", changed, map.len());
        }
        Command::Eval(a) => {
            let (h, w, pred) = load_pgm8(&a.map)?;
            let gt = load_mask(&a.gt, h, w)?;
            let mut c = ConfusionCounts::default();
            for (p, g) in pred.iter().zip(&gt) {
                c.add(*p != 0, *g != 0);
            }
            let m = metrics(&c);
            let csv = format!(
                "oa,kappa,f1,precision,recall,tp,fp,tn,fn\n{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
                m.oa, m.kappa, m.f1, m.precision, m.recall, c.tp, c.fp, c.tn, c.fn_
            );
            std::fs::write(&a.out_csv, &csv)?;
            if let Some(path) = &a.out_overlay {
                save_pgm8(path, h, w, &overlay(&pred, &gt))?;
            }
            println!("eval: OA {:.4} kappa {:.4} F1 {:.4}", m.oa, m.kappa, m.f1);
        }
        Command::CircuitDump(a) => {
            let topology = match a.topology.as_str() {
                "ring" => Topology::Ring,
                "chain" => Topology::Chain,
                other => return Err(Error::Config(format!("unknown topology {other:?}"))),
            };
            let spec = CircuitSpec::new(a.qubits, a.reps, topology);
            let n = spec.param_count();
            let params: Vec<f64> = match &a.params {
                Some(s) => s
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Config(format!("bad parameter {v:?}: {e}")))
                    })
                    .collect::<Result<_>>()?,
                None => vec![0.0; n],
            };
            if params.len() != n {
                return Err(Error::Config(format!(
                    "circuit expects {} parameters, got {}",
                    n,
                    params.len()
                )));
            }
            let u = compose_unitary(&spec, &params);
            println!(
                "# {} qubits, {} reps, {} topology, {} parameters",
                a.qubits, a.reps, a.topology, n
            );
            for row in &u {
                let line: Vec<String> =
                    row.iter().map(|c| format!("{:+.17e}{:+.17e}i", c.re, c.im)).collect();
                println!("{}", line.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{{\"error\":{}}}", serde_json::json!(e.to_string()));
            ExitCode::FAILURE
        }
    }
}
