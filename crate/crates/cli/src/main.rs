use catfa_core::bench;
use catfa_core::io::{self, checkpoint, pgm, runconfig::RunConfig, tensorfile};
use catfa_core::metrics::{self, mean_sd, wilcoxon_one_tailed, Mask, MetricsReport};
use catfa_core::model::Model;
use catfa_core::train::gradcheck::{check, Scope, Target};
use catfa_core::train::synth::{make_task_dataset, standardize, SynthTask};
use catfa_core::train::trainer::train;
use catfa_core::Error;
use clap::{Parser, Subcommand};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable that makes `gradcheck` double the analytic gradients
/// of every target whose name contains its value (`all` matches everything).
const CORRUPT_ENV: &str = "CATFA_GRADCHECK_CORRUPT";

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  gradient check failed
  2  configuration or input error
  3  runtime error, e.g. a non-finite loss";

#[derive(Parser)]
#[command(name = "catfa", version, about = "Train, run and evaluate the segmentation network", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic or on-disk data; writes checkpoint.ctfa and history.csv to out_dir.
    #[command(after_help = format!("Config keys and defaults:\n{}\n\n{EXIT_HELP}", io::runconfig::KEYS_HELP))]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides out_dir in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one image; writes STEM.ctfa probabilities and STEM.pgm mask into --out.
    #[command(after_help = EXIT_HELP)]
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tensor file ([3,H,W] or [1,3,H,W]), greymap, or synth:SEED for a generated sample
        /// whose ground truth goes to OUT/gt/.
        #[arg(long)]
        input: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image metrics of predicted masks against ground truth, as CSV.
    #[command(after_help = EXIT_HELP)]
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Second prediction directory; adds one-tailed signed-rank tests that --pred-dir is better.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention kernel cost against the token reduction ratio, as CSV.
    #[command(after_help = EXIT_HELP)]
    Bench {
        #[arg(long, default_value_t = 4096)]
        tokens: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
        reduction: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of analytic gradients.
    #[command(after_help = EXIT_HELP)]
    Gradcheck {
        /// primitives, blocks or model
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Check,
    Input(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check => 1,
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

fn input(e: impl std::fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| runtime(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut rc = RunConfig::load(config).map_err(input)?;
    if let Some(s) = seed {
        rc.seed = s;
    }
    if let Some(o) = out {
        rc.out_dir = o;
    }
    let mcfg = rc.model_config().map_err(input)?;
    let data = match &rc.data_dir {
        Some(dir) => io::load_dataset::<f32>(dir).map_err(input)?,
        None => make_task_dataset::<f32>(rc.samples, mcfg.input_hw.0, rc.seed, rc.task).map_err(input)?,
    };
    let (model, mut params) = Model::build::<f32>(&mcfg, rc.seed).map_err(input)?;
    let history = train(&model, &mut params, &data, &rc.train_config()).map_err(|e| match e {
        Error::InvalidConfig(_) | Error::Indivisible { .. } | Error::ShapeMismatch { .. } => input(e),
        e => runtime(e),
    })?;
    std::fs::create_dir_all(&rc.out_dir).map_err(runtime)?;
    checkpoint::save(&rc.out_dir.join("checkpoint.ctfa"), &mcfg, &params).map_err(runtime)?;
    std::fs::write(rc.out_dir.join("history.csv"), history.to_csv()).map_err(runtime)?;
    if let Some(last) = history.last() {
        eprintln!("epoch {} train_loss {:.6} val_dice {:.4}", last.epoch, last.train_loss, last.val_dice);
    }
    Ok(())
}

fn cmd_infer(ckpt: &Path, src: &str, out: &Path) -> Result<(), Failure> {
    let ck = checkpoint::load::<f32>(ckpt).map_err(input)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    let (stem, image) = if let Some(seed) = src.strip_prefix("synth:") {
        let seed: u64 = seed.parse().map_err(|_| input(format!("bad synth seed {seed:?}")))?;
        let s = make_task_dataset::<f32>(1, ck.config.input_hw.0, seed, SynthTask::Shapes)
            .map_err(input)?
            .remove(0);
        let stem = format!("synth_{seed}");
        std::fs::create_dir_all(out.join("gt")).map_err(runtime)?;
        let gt = Mask::from_tensor(&s.mask).map_err(runtime)?;
        pgm::write_mask(&out.join("gt").join(format!("{stem}.pgm")), &gt).map_err(runtime)?;
        (stem, s.image)
    } else {
        let path = Path::new(src);
        let image = io::read_image::<f32>(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
        (stem, image)
    };
    let [_, h, w] = *image.shape() else { unreachable!("read_image returns rank 3") };
    let x = standardize(&image).reshape(&[1, 3, h, w]).map_err(runtime)?;
    let prob = ck.model.predict(&ck.params, &x).map_err(|e| match e {
        Error::Indivisible { .. } | Error::ShapeMismatch { .. } => input(e),
        e => runtime(e),
    })?;
    tensorfile::write(&out.join(format!("{stem}.ctfa")), &prob).map_err(runtime)?;
    let mask = Mask::from_tensor(&prob).map_err(runtime)?;
    pgm::write_mask(&out.join(format!("{stem}.pgm")), &mask).map_err(runtime)?;
    Ok(())
}

fn names(files: &[PathBuf]) -> BTreeSet<String> {
    files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect()
}

fn score_dir(dir: &Path, gt_dir: &Path, files: &BTreeSet<String>) -> Result<Vec<MetricsReport>, Failure> {
    files
        .iter()
        .map(|f| {
            let pred = pgm::read_mask(&dir.join(f)).map_err(|e| input(format!("{}: {e}", dir.join(f).display())))?;
            let gt = pgm::read_mask(&gt_dir.join(f)).map_err(|e| input(format!("{}: {e}", gt_dir.join(f).display())))?;
            metrics::evaluate(&pred, &gt).map_err(|e| input(format!("{f}: {e}")))
        })
        .collect()
}

fn row(label: &str, v: &[f64]) -> String {
    let cols: Vec<String> = v.iter().map(|x| format!("{x:.9}")).collect();
    format!("{label},{}\n", cols.join(","))
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, compare: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let list = |d: &Path| {
        io::list_files(d, "pgm")
            .map(|f| names(&f))
            .map_err(|e| input(format!("{}: {e}", d.display())))
    };
    let gt = list(gt_dir)?;
    let mut dirs = vec![pred_dir];
    dirs.extend(compare);
    let mut unmatched = Vec::new();
    for d in &dirs {
        let p = list(d)?;
        unmatched.extend(p.symmetric_difference(&gt).map(|f| {
            let side = if p.contains(f) { d } else { &gt_dir };
            side.join(f).display().to_string()
        }));
    }
    if !unmatched.is_empty() {
        unmatched.sort();
        unmatched.dedup();
        return Err(input(format!("unmatched files: {}", unmatched.join(", "))));
    }
    if gt.is_empty() {
        return Err(input(format!("no .pgm files in {}", gt_dir.display())));
    }
    let reports = score_dir(pred_dir, gt_dir, &gt)?;
    let mut s = format!("file,{}\n", MetricsReport::NAMES.join(","));
    for (f, r) in gt.iter().zip(&reports) {
        s += &row(f, &r.values());
    }
    let column = |rs: &[MetricsReport], k: usize| rs.iter().map(|r| r.values()[k]).collect::<Vec<f64>>();
    let stats: Vec<(f64, f64)> = (0..MetricsReport::NAMES.len()).map(|k| mean_sd(&column(&reports, k))).collect();
    s += &row("mean", &stats.iter().map(|x| x.0).collect::<Vec<_>>());
    s += &row("sd", &stats.iter().map(|x| x.1).collect::<Vec<_>>());
    if let Some(cdir) = compare {
        let other = score_dir(cdir, gt_dir, &gt)?;
        s += "\nmetric,w,p,n,exact\n";
        for (k, name) in MetricsReport::NAMES.iter().enumerate() {
            let (a, b) = (column(&reports, k), column(&other, k));
            // smaller distances are better
            let test = if *name == "hd" { wilcoxon_one_tailed(&b, &a) } else { wilcoxon_one_tailed(&a, &b) };
            match test {
                Ok(t) => writeln!(s, "{name},{},{:.9},{},{}", t.w, t.p, t.n, t.exact).expect("string write"),
                Err(e) => writeln!(s, "{name},error,{},,", e.to_string().replace(',', ";")).expect("string write"),
            }
        }
    }
    write_out(out, &s)
}

fn corrupt(t: Target<'_>) -> Target<'_> {
    let Target { name, store, inputs, eval, grad } = t;
    Target {
        name,
        store,
        inputs,
        eval,
        grad: Box::new(move |p, x, dy| {
            let (dx, mut g) = grad(p, x, dy)?;
            let doubled: Vec<_> = g.iter().map(|(id, t)| (id, t.clone())).collect();
            for (id, t) in doubled {
                g.accumulate(id, &t)?;
            }
            Ok((dx.into_iter().map(|t| t.scale(2.0)).collect(), g))
        }),
    }
}

fn cmd_gradcheck(scope: &str, seed: u64) -> Result<(), Failure> {
    let scope = Scope::parse(scope).ok_or_else(|| input(format!("unknown scope {scope:?}; use primitives, blocks or model")))?;
    let pattern = std::env::var(CORRUPT_ENV).ok().filter(|v| !v.is_empty());
    let threshold = scope.threshold();
    let mut failed = false;
    println!("target,max_rel_err,threshold,verdict");
    for t in scope.targets(seed).map_err(runtime)? {
        let t = match &pattern {
            Some(p) if p == "all" || t.name.contains(p.as_str()) => corrupt(t),
            _ => t,
        };
        let (name, err) = match check(&t, seed, scope.sample()) {
            Ok(r) => (r.name, r.max_rel_err),
            Err(e) => (format!("{} ({e})", t.name), f64::INFINITY),
        };
        let ok = err < threshold;
        failed |= !ok;
        println!("{name},{err:.3e},{threshold:.0e},{}", if ok { "pass" } else { "FAIL" });
    }
    if failed {
        Err(Failure::Check)
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Train { config, seed, out } => cmd_train(&config, seed, out),
        Cmd::Infer { checkpoint, input, out } => cmd_infer(&checkpoint, &input, &out),
        Cmd::Eval { pred_dir, gt_dir, compare, out } => cmd_eval(&pred_dir, &gt_dir, compare.as_deref(), out.as_deref()),
        Cmd::Bench { tokens, channels, reduction, reps, seed, out } => (|| {
            let rows = bench::bench_attention(tokens, channels, &reduction, reps, seed).map_err(input)?;
            let standard = bench::bench_standard(tokens, channels, reps, seed).map_err(runtime)?;
            write_out(out.as_deref(), &bench::to_csv(&rows, Some(standard)))
        })(),
        Cmd::Gradcheck { scope, seed } => cmd_gradcheck(&scope, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Check => eprintln!("error: gradient check failed"),
                Failure::Input(m) | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
