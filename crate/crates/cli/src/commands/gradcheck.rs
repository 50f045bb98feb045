use std::collections::BTreeMap;

use clap::Args;
use vitalflow::gradcheck::{run_gradcheck, GradcheckConfig, TOLERANCE};

use crate::failure::{fail, CmdResult, WithCode, EXIT_GRADCHECK, EXIT_USAGE};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for the model weights and the probed coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of probed coordinates.
    #[arg(long, default_value_t = 64)]
    probes: usize,
    /// Negate the analytic gradient of one parameter family.
    #[arg(long, hide = true)]
    sabotage: Option<String>,
}

pub fn run(args: GradcheckArgs) -> CmdResult {
    let cfg = GradcheckConfig {
        seed: args.seed,
        probes: args.probes,
        sabotage: args.sabotage,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg).code(EXIT_USAGE)?;

    let mut families: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for p in &report.probes {
        let e = families.entry(p.family).or_insert((0.0, 0));
        e.0 = e.0.max(p.rel_error);
        e.1 += 1;
    }
    println!("family       probes  max_rel_error");
    for (family, (max, n)) in &families {
        println!("{family:<12} {n:>6}  {max:.3e}");
    }
    println!(
        "{} probes over {} families, max relative error {:.3e} (tolerance {TOLERANCE:e})",
        report.probes.len(),
        families.len(),
        report.max_rel_error()
    );

    let worst = report
        .probes
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    match worst {
        Some(w) if !report.passed() => fail(
            EXIT_GRADCHECK,
            format!(
                "gradient check failed; worst coordinate {}[{}] ({}): analytic {:.6e}, numeric {:.6e}, relative error {:.3e}",
                w.name, w.index, w.family, w.analytic, w.numeric, w.rel_error
            ),
        ),
        _ => Ok(()),
    }
}
