use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowpatch::attack::{black_box_attack, white_box_attack};
use flowpatch::classical::HornSchunck;
use flowpatch::config::RunConfig;
use flowpatch::eval::{evaluate_attack, Adversary, PlacementPolicy};
use flowpatch::flow::{flow_to_color, read_flo};
use flowpatch::imaging::save_png;
use flowpatch::networks::{read_params, train_supervised, write_params, Family, FlowMethod, Network, NetworkParams};
use flowpatch::patch::Patch;
use flowpatch::synth::{generate_dataset, read_dataset, write_dataset};
use flowpatch::zero_flow::zero_flow_test;
use flowpatch::Error;

/// Relative output paths are resolved under this directory when it is set.
const OUT_ROOT_ENV: &str = "FLOWPATCH_OUT_ROOT";

#[derive(Parser)]
#[command(name = "flowpatch", version, about = "Adversarial patch attacks on optical-flow estimators")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Ed,
    Sp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    White,
    Black,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Static,
    Moving,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with exact ground truth.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network on a generated dataset.
    Train {
        #[arg(long, value_enum)]
        arch: Arch,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Parameter file to write (`.mfnp`); the curve and config land beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Optimize a patch against one (white) or several (black) networks.
    Attack {
        #[arg(long, value_enum, default_value = "white")]
        mode: Mode,
        /// Comma-separated parameter files.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Clean vs attacked EPE for a set of methods.
    Eval {
        /// Comma-separated: `hs` or parameter files.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Patch PNG, or `transparent`.
        #[arg(long)]
        patch: Option<String>,
        #[arg(long, value_enum, default_value = "static")]
        policy: Policy,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replicated-noise diagnostic with per-layer statistics.
    Zeroflow {
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long)]
        patch: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a .flo file as a color PNG.
    Viz {
        #[arg(long)]
        flo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_mag: Option<f32>,
    },
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Toml(_) => 1,
        _ => 2,
    }
}

fn resolve_out(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn create_dir(p: &Path) -> flowpatch::Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> flowpatch::Result<()> {
    std::fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> flowpatch::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot set up {n} workers: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };

    match cli.command {
        Command::GenData { out, count, seed } => {
            let out = resolve_out(&out);
            let seed = seed.unwrap_or(cfg.seed);
            cfg.seed = seed;
            let pairs = generate_dataset(&cfg.scene, count, seed)?;
            write_dataset(&out, &cfg.scene, seed, &pairs)?;
            cfg.write_snapshot(&out)?;
            println!("wrote {count} pairs to {}", out.display());
        }
        Command::Train {
            arch,
            data,
            epochs,
            out,
            seed,
            lr,
        } => {
            let out = resolve_out(&out);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            let family = match arch {
                Arch::Ed => Family::EncoderDecoder,
                Arch::Sp => Family::SpatialPyramid,
            };
            let spec = cfg.network.spec(family);
            let pairs = read_dataset(&data)?;
            let (params, curve) = match train_supervised(&pairs, &spec, &cfg.train) {
                Ok(r) => r,
                Err(Error::Diverged { step, checkpoint }) => {
                    write_params(&checkpoint, &out)?;
                    return Err(Error::Diverged { step, checkpoint });
                }
                Err(e) => return Err(e),
            };
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            if !dir.as_os_str().is_empty() {
                create_dir(&dir)?;
            }
            write_params(&params, &out)?;
            let stem = stem_of(&out);
            let mut csv = String::from("epoch,step,lr,loss\n");
            for p in &curve {
                csv.push_str(&format!("{},{},{},{}\n", p.epoch, p.step, p.lr, p.loss));
            }
            write_text(&dir.join(format!("{stem}_curve.csv")), &csv)?;
            write_text(&dir.join(format!("{stem}_config.toml")), &cfg.to_toml()?)?;
            println!("wrote {} ({} parameters)", out.display(), params.num_parameters());
        }
        Command::Attack {
            mode,
            targets,
            data,
            patch_size,
            steps,
            out,
            seed,
        } => {
            let out = resolve_out(&out);
            if let Some(s) = patch_size {
                cfg.attack.patch_size = s;
            }
            if let Some(s) = steps {
                cfg.attack.steps = s;
            }
            if let Some(s) = seed {
                cfg.attack.seed = s;
            }
            if matches!(mode, Mode::Black) && targets.len() < 2 {
                return Err(Error::Usage(
                    "black-box mode jointly optimizes one patch for several networks; pass at least two --targets".into(),
                ));
            }
            let nets = targets.iter().map(|p| load_network(p)).collect::<flowpatch::Result<Vec<_>>>()?;
            let pairs = read_dataset(&data)?;
            let refs: Vec<&Network> = nets.iter().collect();
            let outcome = match mode {
                Mode::White if refs.len() == 1 => white_box_attack(refs[0], &pairs, &cfg.attack)?,
                Mode::White => {
                    return Err(Error::Usage(
                        "white-box mode attacks exactly one network; use --mode black for several".into(),
                    ))
                }
                Mode::Black => black_box_attack(&refs, &pairs, &cfg.attack)?,
            };
            create_dir(&out)?;
            let provenance = serde_json::json!({
                "mode": match mode { Mode::White => "white", Mode::Black => "black" },
                "targets": outcome.target_names,
                "steps": cfg.attack.steps,
                "seed": cfg.attack.seed,
                "best_step": outcome.best_step,
                "best_loss": outcome.best_loss,
            });
            outcome.patch.save(out.join("patch.png"), provenance)?;
            outcome.write_curve_csv(out.join("loss_curve.csv"))?;
            cfg.write_snapshot(&out)?;
            println!(
                "wrote {} (best loss {})",
                out.join("patch.png").display(),
                outcome.best_loss.map_or("n/a".into(), |l| format!("{l:.4}"))
            );
        }
        Command::Eval {
            methods,
            patch,
            policy,
            data,
            out,
            seed,
        } => {
            let out = resolve_out(&out);
            cfg.eval.policy = match policy {
                Policy::Static => PlacementPolicy::RandomStatic,
                Policy::Moving => PlacementPolicy::RealisticMotion,
                Policy::None => PlacementPolicy::None,
            };
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let size = cfg.attack.patch_size;
            let adversary = match patch.as_deref() {
                Some("transparent") => Adversary::Transparent(Patch::random(size, size, 0)?),
                Some(p) => Adversary::Patch(Patch::load(p)?.0),
                None if cfg.eval.policy == PlacementPolicy::None => Adversary::Patch(Patch::random(size, size, 0)?),
                None => return Err(Error::Usage("--patch is required unless --policy none".into())),
            };
            let methods = build_methods(&methods, &cfg)?;
            let refs: Vec<&dyn FlowMethod> = methods.iter().map(|m| m.as_ref()).collect();
            let pairs = read_dataset(&data)?;
            let report = evaluate_attack(&refs, &adversary, &pairs, &cfg.eval)?;
            create_dir(&out)?;
            report.write(&out, "eval")?;
            cfg.write_snapshot(&out)?;
            print!("{}", report.to_table());
        }
        Command::Zeroflow {
            methods,
            patch,
            out,
            seed,
        } => {
            let out = resolve_out(&out);
            if let Some(s) = seed {
                cfg.zero_flow.seed = s;
            }
            let patch = patch.map(|p| Patch::load(p).map(|(p, _)| p)).transpose()?;
            let methods = build_methods(&methods, &cfg)?;
            create_dir(&out)?;
            for m in &methods {
                let report = zero_flow_test(m.as_ref(), patch.as_ref(), &cfg.zero_flow)?;
                report.write(&out)?;
                let amp = report
                    .amplification()
                    .map(|a| format!(", max decoder ratio {:.3} vs encoder {:.3}", a.max_decoder_ratio, a.max_encoder_ratio))
                    .unwrap_or_default();
                println!(
                    "{}: mean |flow| {:.4} without patch, {} with{amp}",
                    report.method,
                    report.flow_mean_mag_without,
                    report.flow_mean_mag_with.map_or("n/a".into(), |v| format!("{v:.4}"))
                );
            }
            cfg.write_snapshot(&out)?;
        }
        Command::Viz { flo, out, max_mag } => {
            let out = resolve_out(&out);
            let flow = read_flo(&flo)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_png(&flow_to_color(&flow, max_mag), &out)?;
        }
    }
    Ok(())
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map_or_else(|| "net".into(), |s| s.to_string_lossy().into_owned())
}

fn load_network(p: &Path) -> flowpatch::Result<Network> {
    let params: NetworkParams = read_params(p)?;
    Ok(Network::new(stem_of(p), params))
}

fn build_methods(names: &[String], cfg: &RunConfig) -> flowpatch::Result<Vec<Box<dyn FlowMethod>>> {
    names
        .iter()
        .map(|name| -> flowpatch::Result<Box<dyn FlowMethod>> {
            if name == "hs" {
                return Ok(Box::new(HornSchunck { cfg: cfg.hs.clone() }));
            }
            let path = Path::new(name);
            if path.is_file() {
                return Ok(Box::new(load_network(path)?));
            }
            Err(Error::Usage(format!(
                "unknown method '{name}'; available: {}",
                available_methods(path).join(", ")
            )))
        })
        .collect()
}

/// `hs` plus parameter files next to the requested path.
fn available_methods(requested: &Path) -> Vec<String> {
    let dir = requested
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut found: Vec<String> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "mfnp"))
        .map(|p| p.display().to_string())
        .collect();
    found.sort();
    let mut all = vec!["hs".to_string()];
    all.extend(found);
    if all.len() == 1 {
        all.push("<path to a .mfnp parameter file>".into());
    }
    all
}
