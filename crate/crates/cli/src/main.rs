use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gabor_texture::autodiff::Tensor;
use gabor_texture::checks::{gradient_suite, TOLERANCE};
use gabor_texture::config::RunConfig;
use gabor_texture::data::{default_classes, read_tensor, spotted_class, write_tensor, Dataset, MANIFEST_FILE};
use gabor_texture::gabor::{kernel_size, synthesize, Band, GaborFilterSpec};
use gabor_texture::network::Model;
use gabor_texture::oracle::dft2;

#[derive(Parser)]
#[command(name = "gabortex", version, about = "Learnable Gabor texture features: data, training, checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic texture dataset (tensor files plus manifest.json).
    GenData(GenData),
    /// Train a model from a flat key = value config.
    Train(Train),
    /// Evaluate a checkpoint; prints accuracy and mean selected regions.
    Eval(Eval),
    /// Finite-difference gradient checks for every differentiable stage.
    Gradcheck(Gradcheck),
    /// Dump one synthesized Gabor kernel and its DFT magnitude.
    SynthFilter(SynthFilter),
    /// Dump per-filter intensity maps and counting features of one region.
    ExportMaps(ExportMaps),
}

#[derive(Args)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of classes; the fifth is the spotted texture.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 75)]
    per_class: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Fraction of each class assigned to the training split.
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// Run config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct Eval {
    /// Run config file; supplies the dataset and default checkpoint.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory [default: <out_dir>/checkpoint].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write selected regions, one `image_id k x0 y0 x1 y1` line each.
    #[arg(long)]
    regions: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct Gradcheck {
    /// Largest relative error accepted.
    #[arg(long, default_value_t = TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print every checked tensor, not just each stage's worst.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct SynthFilter {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    sigma_x: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma_y: f64,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Radial frequency in cycles/pixel.
    #[arg(long, default_value_t = 0.25)]
    w: f64,
    /// Region size that fixes the kernel extent.
    #[arg(long, default_value_t = 32)]
    region_size: usize,
    /// Side of the zero-padded DFT grid.
    #[arg(long, default_value_t = 64)]
    dft_size: usize,
}

#[derive(Args)]
struct ExportMaps {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image tensor file.
    #[arg(long)]
    image: PathBuf,
    /// Proposal index.
    #[arg(long, default_value_t = 0)]
    region: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SynthFilter(a) => synth_filter(a),
        Command::ExportMaps(a) => export_maps(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(a: GenData) -> Result<ExitCode> {
    let mut specs = default_classes();
    specs.push(spotted_class());
    if a.classes < 2 || a.classes > specs.len() {
        bail!("--classes must be between 2 and {}", specs.len());
    }
    specs.truncate(a.classes);
    let ds = Dataset::synthesize(&specs, a.per_class, a.ratio, a.size, a.seed)?;
    let manifest = ds.write(&a.out)?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        manifest.samples.len(),
        ds.train.len(),
        ds.test.len(),
        a.out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn train(a: Train) -> Result<ExitCode> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.model.steps = steps;
    }
    cfg.model.threads = a.threads;
    let ds = Dataset::load(cfg.manifest_path())?;
    if ds.size != cfg.model.image_size {
        bail!("dataset images are {0}x{0} but image_size is {1}", ds.size, cfg.model.image_size);
    }
    let mut model = Model::<f64>::new(cfg.model.clone(), ds.classes.len())?;
    let report = model.train(&ds.train)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("metrics.csv"), report.metrics_csv())?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    model.save(cfg.checkpoint_dir(), &ds.classes)?;
    if let Some(step) = report.diverged_at {
        eprintln!("training diverged at step {step}");
        return Ok(ExitCode::FAILURE);
    }
    let train_eval = model.evaluate(&ds.train)?;
    let test_eval = model.evaluate(&ds.test)?;
    println!("train_accuracy {:.4}", train_eval.accuracy);
    println!("test_accuracy {:.4}", test_eval.accuracy);
    println!("mean_regions {:.3}", test_eval.mean_regions);
    println!("checkpoint {}", cfg.checkpoint_dir().display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: Eval) -> Result<ExitCode> {
    let cfg = load_config(&a.config)?;
    let dir = a.checkpoint.unwrap_or_else(|| cfg.checkpoint_dir());
    let (mut model, classes) =
        Model::<f64>::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    model.config.threads = a.threads;
    let ds = Dataset::load(cfg.manifest_path())?;
    if ds.classes != classes {
        bail!("checkpoint classes {classes:?} do not match dataset classes {:?}", ds.classes);
    }
    let samples = match a.split {
        SplitArg::Train => &ds.train,
        SplitArg::Test => &ds.test,
    };
    let report = model.evaluate(samples)?;
    println!("accuracy {:.4}", report.accuracy);
    println!("mean_regions {:.3}", report.mean_regions);
    if let Some(path) = a.regions {
        let mut out = String::new();
        for (s, p) in samples.iter().zip(&report.predictions) {
            for &k in &p.selected {
                let r = model.proposals()[k];
                out.push_str(&format!("{} {k} {} {} {} {}\n", s.name, r.x0, r.y0, r.x1, r.y1));
            }
        }
        fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: Gradcheck) -> Result<ExitCode> {
    let stages = gradient_suite(a.seed)?;
    let mut ok = true;
    for stage in &stages {
        let passed = stage.passed(a.tol);
        ok &= passed;
        println!("{} {}", if passed { "PASS" } else { "FAIL" }, stage.worst());
        if a.verbose {
            for r in &stage.tensors {
                println!("    {r}");
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth_filter(a: SynthFilter) -> Result<ExitCode> {
    let k = kernel_size(a.region_size);
    if a.dft_size < k {
        bail!("--dft-size {} is smaller than the {k}x{k} kernel", a.dft_size);
    }
    let spec = GaborFilterSpec {
        sigma_x: a.sigma_x,
        sigma_y: a.sigma_y,
        theta: a.theta,
        w: a.w,
        band: Band::Low,
        kernel_size: k,
    };
    let (re, im) = synthesize(&spec);
    let n = a.dft_size;
    let pad = |plane: &[f64]| {
        let mut out = vec![0.0; n * n];
        for i in 0..k {
            out[i * n..i * n + k].copy_from_slice(&plane[i * k..(i + 1) * k]);
        }
        out
    };
    let spectrum = dft2(&pad(&re), n).combine_as_complex(&dft2(&pad(&im), n));
    fs::create_dir_all(&a.out)?;
    write_tensor(a.out.join("kernel_re.tnsr"), &Tensor::new(vec![k, k], re)?)?;
    write_tensor(a.out.join("kernel_im.tnsr"), &Tensor::new(vec![k, k], im)?)?;
    write_tensor(a.out.join("dft_magnitude.tnsr"), &Tensor::new(vec![n, n], spectrum.magnitude())?)?;
    let (fx, fy) = spectrum.peak(false);
    println!("kernel {k}x{k}; dft peak at ({fx:.4}, {fy:.4}) c/px, radius {:.4}", fx.hypot(fy));
    Ok(ExitCode::SUCCESS)
}

fn export_maps(a: ExportMaps) -> Result<ExitCode> {
    let (model, _) = Model::<f64>::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let image: Tensor<f64> = read_tensor(&a.image)?;
    let (maps, counts) = model.region_maps(image.data(), a.region)?;
    fs::create_dir_all(&a.out)?;
    for (n, map) in maps.iter().enumerate() {
        let t = Tensor::new(vec![map.size, map.size], map.values.clone())?;
        write_tensor(a.out.join(format!("map_{n:02}.tnsr")), &t)?;
    }
    let m = counts.first().map_or(0, Vec::len);
    let flat: Vec<f64> = counts.into_iter().flatten().collect();
    write_tensor(a.out.join("counts.tnsr"), &Tensor::new(vec![maps.len(), m], flat)?)?;
    let r = model.proposals()[a.region];
    let mut f = fs::File::create(a.out.join("region.txt"))?;
    writeln!(f, "{} {} {} {} {} {}", a.image.display(), a.region, r.x0, r.y0, r.x1, r.y1)?;
    println!("wrote {} maps of {}x{} to {}", maps.len(), maps.first().map_or(0, |m| m.size), maps.first().map_or(0, |m| m.size), a.out.display());
    Ok(ExitCode::SUCCESS)
}
