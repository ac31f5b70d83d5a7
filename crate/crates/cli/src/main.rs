use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use fsad_core::config::RunConfig;
use fsad_core::pipeline::{ablation_matrix, ablation_table, run_ablation, Bundle};
use fsad_core::{scoring, PipelineF32};

/// Few-shot anomaly detection with learned prompts and a patch memory.
#[derive(Parser, Debug)]
#[command(name = "fsad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More log output (-v info is the default, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train prompt banks and memories for every category and seed.
    Train(RunArgs),
    /// Score the test splits with trained bundles and write metric reports.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Also write per-image heatmaps and overlays.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Score one image with one trained bundle.
    Score {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        image: PathBuf,
        /// Bundle file; defaults to the one for --category and --seed.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 16-bit grayscale map output.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Colour overlay output.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid.
    Ablate(RunArgs),
    /// Print the effective configuration as TOML.
    ShowConfig(RunArgs),
}

/// Config file plus flag overrides; flags win over the file.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Comma-separated category names.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    #[arg(short, long)]
    k: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// BPE merges file for the text tokenizer.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Disable semantic concatenation (needs --vad or --coop-baseline).
    #[arg(long)]
    no_sc: bool,
    #[arg(long)]
    no_eam: bool,
    #[arg(long, conflicts_with = "vad")]
    no_vad: bool,
    #[arg(long)]
    no_align: bool,
    /// Keep the memory branch on; required alongside --no-sc.
    #[arg(long)]
    vad: bool,
    /// With --no-sc, train a two-class learnable-context baseline.
    #[arg(long, requires = "no_sc")]
    coop_baseline: bool,
    /// Do not read or write the encoded-image cache.
    #[arg(long)]
    no_cache: bool,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        if self.no_sc && !self.vad && !self.coop_baseline {
            bail!(fsad_core::Error::input(
                "--no-sc disables prompt scoring; pass --vad (vision-only) or --coop-baseline"
            ));
        }
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset_root {
            c.dataset.root = v.clone();
        }
        if let Some(v) = &self.categories {
            c.dataset.categories = v.clone();
        }
        if let Some(v) = self.k {
            c.run.k = v;
        }
        if let Some(v) = &self.seeds {
            c.run.seeds = v.clone();
        }
        if let Some(v) = &self.checkpoint {
            c.backbone.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.vocab {
            c.backbone.vocab = Some(v.clone());
        }
        if let Some(v) = &self.output {
            c.run.output = v.clone();
        }
        if let Some(v) = self.steps {
            c.training.steps = v;
        }
        if self.no_sc {
            c.ablation.sc = false;
        }
        if self.no_eam {
            c.ablation.eam = false;
        }
        if self.no_vad {
            c.ablation.vad = false;
        }
        if self.vad {
            c.ablation.vad = true;
        }
        if self.no_align {
            c.ablation.align = false;
        }
        if self.coop_baseline {
            c.ablation.coop_baseline = true;
        }
        if self.no_cache {
            c.backbone.cache = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let p = PipelineF32::new(args.resolve()?)?;
            let manifest = p.train_all()?;
            let bundles: usize = manifest.shots.values().map(|s| s.len()).sum();
            println!("trained {bundles} bundle(s) in {}", p.config.run.output.display());
            println!("manifest {}", manifest.hash()?);
        }
        Command::Eval { run, heatmaps } => {
            let mut cfg = run.resolve()?;
            cfg.eval.heatmaps |= heatmaps;
            let report = PipelineF32::new(cfg)?.evaluate_all()?;
            print!("{}", report.to_table());
        }
        Command::Score {
            run,
            image,
            bundle,
            category,
            seed,
            heatmap,
            overlay,
        } => {
            let p = PipelineF32::new(run.resolve()?)?;
            let path = match (bundle, category) {
                (Some(b), _) => b,
                (None, Some(c)) => p.bundle_path(&c, seed),
                (None, None) => bail!(fsad_core::Error::input("score needs --bundle or --category")),
            };
            let b = Bundle::<f32>::load(&path)?;
            let s = p.score_path(&b, &image)?;
            println!("{}\t{:.6}", image.display(), s.s_img);
            if let Some(h) = heatmap {
                scoring::write_heatmap_png(&h, &s.m_pix)?;
            }
            if let Some(o) = overlay {
                let base = fsad_core::data::load_display_image(&image, p.preprocess_spec())?;
                scoring::write_overlay_png(&o, &base, &s.m_pix)?;
            }
        }
        Command::Ablate(args) => {
            let p = PipelineF32::new(args.resolve()?)?;
            let results = run_ablation(&p, &ablation_matrix())?;
            print!("{}", ablation_table(&results));
        }
        Command::ShowConfig(args) => {
            print!("{}", args.resolve()?.to_toml()?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<fsad_core::Error>() {
        Some(e) => e.exit_code() as u8,
        None => 2,
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0 | 1) => "info",
        (false, 2) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
