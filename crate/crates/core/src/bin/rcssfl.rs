use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rcssfl::sim::{CsvSink, SimConfig, Simulation};

/// Run a semi-supervised federated learning simulation and write per-round
/// metrics as CSV.
#[derive(Parser, Debug)]
#[command(name = "rcssfl", version)]
struct Args {
    /// Flat key=value settings file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Also write per-client scores to <stem>.selection.csv.
    #[arg(long)]
    selection_log: bool,
    /// Record measured wall time instead of 0.
    #[arg(long)]
    wall_clock: bool,
    /// Suppress the per-round progress line.
    #[arg(long, short)]
    quiet: bool,

    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    participation: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    local_epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    server_samples: Option<String>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    lambda: Option<String>,
    /// Cosine admission threshold.
    #[arg(long)]
    delta: Option<String>,
    /// `median*<k>` or a fixed value.
    #[arg(long)]
    wasserstein_cap: Option<String>,
    /// off, 2, 4, 8 or 16.
    #[arg(long)]
    quant_bits: Option<String>,
    /// auto or a fixed clip threshold.
    #[arg(long)]
    alpha: Option<String>,
    /// fedavg, fedsgd or gma.
    #[arg(long)]
    agg: Option<String>,
    /// off, cosine, wasserstein or both.
    #[arg(long)]
    selection: Option<String>,
    /// none, label-flip or gaussian.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    malicious: Option<String>,
    #[arg(long)]
    flip_from: Option<String>,
    #[arg(long)]
    flip_to: Option<String>,
    /// Gaussian attack variance.
    #[arg(long)]
    variance: Option<String>,
    /// iid or non-iid.
    #[arg(long)]
    dist: Option<String>,
    /// synthetic or mnist:<images>,<labels>[,<test images>,<test labels>].
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    separation: Option<String>,
    #[arg(long)]
    test_fraction: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl Args {
    /// Flag overrides in an order where dependent keys follow the key they
    /// refine.
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 28] = [
            ("clients", &self.clients),
            ("participation", &self.participation),
            ("rounds", &self.rounds),
            ("local-epochs", &self.local_epochs),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("batch", &self.batch),
            ("server-samples", &self.server_samples),
            ("lambda", &self.lambda),
            ("delta", &self.delta),
            ("wasserstein-cap", &self.wasserstein_cap),
            ("quant-bits", &self.quant_bits),
            ("alpha", &self.alpha),
            ("agg", &self.agg),
            ("selection", &self.selection),
            ("attack", &self.attack),
            ("malicious", &self.malicious),
            ("flip-from", &self.flip_from),
            ("flip-to", &self.flip_to),
            ("variance", &self.variance),
            ("dist", &self.dist),
            ("dataset", &self.dataset),
            ("classes", &self.classes),
            ("per-class", &self.per_class),
            ("features", &self.features),
            ("separation", &self.separation),
            ("test-fraction", &self.test_fraction),
            ("seed", &self.seed),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

fn build_config(args: &Args) -> rcssfl::Result<SimConfig> {
    let mut cfg = match &args.config {
        Some(path) => SimConfig::from_file(path)?,
        None => SimConfig::default(),
    };
    for (key, value) in args.overrides() {
        cfg.apply(key, value)?;
    }
    if args.wall_clock {
        cfg.record_wall_time = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &Args) -> rcssfl::Result<()> {
    let cfg = build_config(args)?;
    let mut sim = Simulation::new(cfg)?;
    let mut sink = CsvSink::create(&args.out, args.selection_log)?;
    let total = sim.config().rounds;
    let metrics = sim.run_with(|m| {
        if !args.quiet {
            eprintln!(
                "round {:>4}/{total}  acc {:.4}  selected {:>3} ({} malicious)",
                m.round,
                m.accuracy,
                m.selected.len(),
                m.n_malicious_selected
            );
        }
        sink.write(m)
    })?;
    if let Some(last) = metrics.last() {
        println!("final accuracy {:.4} after {} rounds", last.accuracy, last.round);
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
