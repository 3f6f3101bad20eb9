use std::path::PathBuf;

use fairbranch_core::data::{generate_synthetic, save_csv, save_meta, SyntheticSpec};

use crate::util::{usage_check, CliResult};

#[derive(clap::Args, Debug)]
pub struct GenerateArgs {
    /// Number of binary prediction tasks.
    #[arg(long)]
    tasks: usize,
    /// Latent task families sharing a labeler; tasks are assigned round-robin.
    #[arg(long, default_value_t = 1)]
    families: usize,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    features: usize,
    /// Label bias injected against the unprivileged group on odd tasks.
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
    /// Uniform label flip probability.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving data.csv and meta.json.
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

pub fn run(args: &GenerateArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        n_samples: args.samples,
        n_features: args.features,
        n_tasks: args.tasks,
        n_families: args.families,
        bias_strength: args.bias,
        noise: args.noise,
        seed: args.seed,
    };
    usage_check(spec.validate())?;
    let (data, meta) = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("data.csv");
    save_csv(&data, &csv_path)?;
    save_meta(&meta, &args.out.join("meta.json"))?;
    let g_rate =
        data.protected.iter().filter(|&&s| s == 0).count() as f64 / data.n_samples() as f64;
    println!(
        "wrote {}: {} samples, {} features, {} tasks, group rates {:.3}/{:.3}",
        csv_path.display(),
        data.n_samples(),
        data.n_features(),
        data.n_tasks(),
        g_rate,
        1.0 - g_rate,
    );
    Ok(())
}
