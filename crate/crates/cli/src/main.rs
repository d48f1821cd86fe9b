//! `voxfab`: analysis, repair, generation, training and export of voxel parts.
//!
//! Exit status: 0 on success, 1 when a gated verdict fails (repair does not
//! converge, gradient check over tolerance), 2 on usage, I/O or format errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use voxfab::bench::{self, Pipeline};
use voxfab::constraints::{evaluate, repair, RepairOptions};
use voxfab::decoder::vfm::{load_model, save_model};
use voxfab::decoder::LatentCode;
use voxfab::meshio::{decode_stl, decode_vxg, encode_vxg, grid_to_mesh, save_stl, voxelize_fit, VXG_MAGIC};
use voxfab::training::gradcheck::{gradcheck, DEFAULT_SEED};
use voxfab::training::{train, write_history_csv, TrainConfig};
use voxfab::{PrintabilitySpec, VoxelGrid};

#[derive(Parser)]
#[command(name = "voxfab", version, about = "Manufacturability analysis and generation for voxel parts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or save the constraint report of a VXG or STL part.
    Analyze {
        input: PathBuf,
        /// Voxel pitch in mm (voxelization pitch for STL, override for VXG).
        #[arg(long)]
        pitch: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Repair a part until it is manufacturable.
    Repair {
        input: PathBuf,
        /// Output grid; `.stl` writes a mesh, anything else VXG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "islands,voids,support,thicken")]
        strategies: Vec<Strategy>,
        #[arg(long)]
        pitch: Option<f64>,
    },
    /// Decode prior samples from a trained model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Threshold only, skipping the void and connectivity projection.
        #[arg(long)]
        unconstrained: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on procedural shapes.
    Train {
        /// Number of procedural training shapes.
        #[arg(long, default_value_t = 200)]
        procedural: usize,
        #[arg(long, default_value_t = 16)]
        res: usize,
        #[arg(long, default_value_t = 32)]
        latent: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.01)]
        lambda2: f64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV (defaults to the model path with `.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Write the voxel surface of a VXG grid as STL.
    Export {
        input: PathBuf,
        #[arg(long)]
        stl: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Voxelize a closed STL mesh.
    Voxelize {
        input: PathBuf,
        #[arg(long)]
        pitch: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        bits: u32,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train two models and compare the three generation pipelines.
    Bench {
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 200)]
        procedural: usize,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Islands,
    Voids,
    Support,
    Thicken,
}

enum Failure {
    /// A gated check did not pass.
    Verdict(String),
    /// Bad input, unreadable or unwritable files, invalid settings.
    Input(String),
}

impl From<voxfab::Error> for Failure {
    fn from(e: voxfab::Error) -> Self {
        match e {
            voxfab::Error::RepairDidNotConverge(_) => Failure::Verdict(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn read(path: &Path) -> std::result::Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn is_stl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("stl"))
}

/// Loads a VXG grid, or voxelizes an STL mesh, telling them apart by magic.
fn load_part(path: &Path, pitch: Option<f64>) -> std::result::Result<VoxelGrid, Failure> {
    let bytes = read(path)?;
    let bad = |e: voxfab::Error| Failure::Input(format!("{}: {e}", path.display()));
    if bytes.starts_with(VXG_MAGIC) {
        let g = decode_vxg(&bytes).map_err(bad)?;
        return match pitch {
            Some(p) => VoxelGrid::from_occupancy(g.dims(), p, g.occupancy().to_vec()).map_err(bad),
            None => Ok(g),
        };
    }
    match decode_stl(&bytes) {
        Ok(mesh) => voxelize_fit(&mesh, pitch.unwrap_or(1.0)).map_err(bad),
        Err(e) if is_stl(path) => Err(bad(e)),
        Err(_) => Err(Failure::Input(format!("{}: neither a VXG grid nor an STL mesh", path.display()))),
    }
}

fn save_part(path: &Path, g: &VoxelGrid, ascii: bool) -> Outcome {
    if is_stl(path) {
        let mesh = grid_to_mesh(g)?;
        save_stl(path, &mesh, ascii).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
    } else {
        write(path, encode_vxg(g))
    }
}

fn analyze(input: &Path, pitch: Option<f64>, report: Option<&Path>) -> Outcome {
    let g = load_part(input, pitch)?;
    let r = evaluate(&g, &PrintabilitySpec::default());
    let json = serde_json::to_string_pretty(&r).map_err(|e| Failure::Input(e.to_string()))? + "\n";
    match report {
        Some(path) => {
            write(path, json)?;
            println!("{}: {} voxels, manufacturable = {}", input.display(), g.count(), r.manufacturable);
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn repair_cmd(input: &Path, out: &Path, strategies: &[Strategy], pitch: Option<f64>) -> Outcome {
    let g = load_part(input, pitch)?;
    let has = |s| strategies.contains(&s);
    let opts = RepairOptions {
        drop_islands: has(Strategy::Islands),
        fill_voids: has(Strategy::Voids),
        add_support_columns: has(Strategy::Support),
        thicken: has(Strategy::Thicken),
        ..RepairOptions::default()
    };
    let fixed = repair(&g, &PrintabilitySpec::default(), &opts)?;
    save_part(out, &fixed, false)?;
    println!("{}: {} -> {} voxels", out.display(), g.count(), fixed.count());
    Ok(())
}

fn generate(model: &Path, count: usize, seed: u64, unconstrained: bool, out: &Path) -> Outcome {
    let (dec, _) = load_model(model).map_err(|e| Failure::Input(format!("{}: {e}", model.display())))?;
    fs::create_dir_all(out).map_err(|e| Failure::Input(format!("cannot create {}: {e}", out.display())))?;
    let spec = PrintabilitySpec::default();
    let pipeline = if unconstrained { Pipeline::Unconstrained } else { Pipeline::Decoder };
    for (i, z) in LatentCode::sample_many(count, dec.cfg.latent_dim, seed).iter().enumerate() {
        let (g, _) = bench::run_pipeline(pipeline, &dec, z, &spec)?;
        let path = out.join(format!("sample_{i:04}.vxg"));
        write(&path, encode_vxg(&g))?;
        let r = evaluate(&g, &spec);
        println!("{}: {} voxels, manufacturable = {}", path.display(), g.count(), r.manufacturable);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    procedural: usize,
    res: usize,
    latent: usize,
    lambda1: f64,
    lambda2: f64,
    epochs: usize,
    seed: u64,
    out: &Path,
    history: Option<&Path>,
) -> Outcome {
    let cfg = TrainConfig {
        dataset_size: procedural,
        resolution: res,
        latent_dim: latent,
        lambda1,
        lambda2,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&cfg)?;
    save_model(out, &outcome.decoder, &outcome.encoder)
        .map_err(|e| Failure::Input(format!("cannot write {}: {e}", out.display())))?;
    let csv_path = history.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"));
    let mut csv = Vec::new();
    write_history_csv(&outcome.history, &mut csv)?;
    write(&csv_path, csv)?;
    for (i, h) in outcome.history.iter().enumerate() {
        println!("epoch {:3}  recon {:.5}  manuf {:.5}  kl {:.4}  total {:.5}", i + 1, h.recon, h.manuf, h.kl, h.total);
    }
    println!("saved {}", out.display());
    Ok(())
}

fn gradcheck_cmd(bits: u32, report: Option<&Path>) -> Outcome {
    if bits != 64 {
        return Err(Failure::Input(format!("gradient checking needs 64-bit floats, got --bits {bits}")));
    }
    let r = gradcheck(DEFAULT_SEED)?;
    for t in &r.tensors {
        println!("{:24} {:5} entries  max rel {:.3e}", t.name, t.entries, t.max_rel_error);
    }
    println!(
        "max relative error {:.3e} over {} entries (step {:e}, tolerance {:e})",
        r.max_rel_error, r.checked, r.step, r.tolerance
    );
    if let Some(path) = report {
        write(path, serde_json::to_string_pretty(&r).map_err(|e| Failure::Input(e.to_string()))? + "\n")?;
    }
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Verdict(format!("gradient check failed: {:.3e} ≥ {:e}", r.max_rel_error, r.tolerance)))
    }
}

#[allow(clippy::too_many_arguments)]
fn bench_cmd(
    samples: usize,
    res: usize,
    seed: u64,
    epochs: usize,
    procedural: usize,
    json: Option<&Path>,
    csv: Option<&Path>,
) -> Outcome {
    let cfg = TrainConfig { resolution: res, seed, epochs, dataset_size: procedural, ..TrainConfig::default() };
    let r = bench::bench(&cfg, samples)?;
    println!(
        "{:16} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "pipeline", "manuf %", "wall mm", "overhang %", "decode ms", "total ms"
    );
    for m in &r.pipelines {
        println!(
            "{:16} {:8.2} {:10.3} {:10.3} {:10.3} {:10.3}",
            m.pipeline.name(),
            m.manufacturability_rate,
            m.mean_min_wall_thickness,
            m.overhang_violation_pct,
            m.mean_decode_ms,
            m.mean_inference_ms
        );
    }
    if let Some(path) = json {
        write(path, r.to_json()?)?;
    }
    if let Some(path) = csv {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        write(path, buf)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Analyze { input, pitch, report } => analyze(&input, pitch, report.as_deref()),
        Command::Repair { input, out, strategies, pitch } => repair_cmd(&input, &out, &strategies, pitch),
        Command::Generate { model, count, seed, unconstrained, out } => {
            generate(&model, count, seed, unconstrained, &out)
        }
        Command::Train { procedural, res, latent, lambda1, lambda2, epochs, seed, out, history } => {
            train_cmd(procedural, res, latent, lambda1, lambda2, epochs, seed, &out, history.as_deref())
        }
        Command::Export { input, stl, ascii } => {
            let bytes = read(&input)?;
            let g = decode_vxg(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", input.display())))?;
            let mesh = grid_to_mesh(&g)?;
            save_stl(&stl, &mesh, ascii).map_err(|e| Failure::Input(format!("cannot write {}: {e}", stl.display())))?;
            println!("{}: {} triangles", stl.display(), mesh.triangles.len());
            Ok(())
        }
        Command::Voxelize { input, pitch, out } => {
            let mesh = decode_stl(&read(&input)?).map_err(|e| Failure::Input(format!("{}: {e}", input.display())))?;
            let g = voxelize_fit(&mesh, pitch).map_err(|e| Failure::Input(format!("{}: {e}", input.display())))?;
            write(&out, encode_vxg(&g))?;
            println!("{}: {:?} grid, {} voxels", out.display(), g.dims(), g.count());
            Ok(())
        }
        Command::Gradcheck { bits, report } => gradcheck_cmd(bits, report.as_deref()),
        Command::Bench { samples, res, seed, epochs, procedural, json, csv } => {
            bench_cmd(samples, res, seed, epochs, procedural, json.as_deref(), csv.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verdict(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
