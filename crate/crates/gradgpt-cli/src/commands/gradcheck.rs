//! `gradgpt gradcheck`: certify every analytical gradient against central
//! finite differences on the built-in verification fixture. Always runs at
//! 64-bit (the finite-difference stencil needs the precision). The process
//! exits non-zero when the check fails.

use anyhow::{bail, Result};
use clap::Args;
use gradgpt_core::gradcheck::{render_kv, render_table, sweep, tiny_fixture_probe, GradSettings};
use gradgpt_core::Error;

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Maximum allowed relative error per tensor.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Self-test fault injection: corrupt the analytic gradient of every
    /// tensor whose name contains this pattern (e.g. 'v.w' or 'w_v'), then
    /// confirm the sweep catches it.
    #[arg(long)]
    pub corrupt: Option<String>,
}

/// Users habitually write `w_v` for what the engine names `….v.w`; map the
/// `w_`/`b_` prefix form onto the internal `<layer>.<w|b>` suffix form.
fn swapped_pattern(pattern: &str) -> Option<String> {
    let (kind, layer) = pattern.split_once('_')?;
    if (kind == "w" || kind == "b") && !layer.is_empty() {
        Some(format!("{layer}.{kind}"))
    } else {
        None
    }
}

pub fn run(args: &GradcheckArgs) -> Result<()> {
    let (config, params, probe) = tiny_fixture_probe();
    let settings = GradSettings {
        tolerance: args.tolerance,
        corrupt: args.corrupt.clone(),
        ..GradSettings::exhaustive()
    };

    let report = match sweep(&params, &config, &probe, &settings) {
        Ok(report) => report,
        // If the literal pattern names nothing, retry in the engine's naming
        // convention before giving up.
        Err(Error::Invalid(msg)) if msg.contains("matches no parameter tensor") => {
            let retry = args
                .corrupt
                .as_deref()
                .and_then(swapped_pattern)
                .ok_or(Error::Invalid(msg))?;
            let settings = GradSettings { corrupt: Some(retry), ..settings };
            sweep(&params, &config, &probe, &settings)?
        }
        Err(e) => return Err(e.into()),
    };

    print!("{}", render_table(&report));
    println!();
    print!("{}", render_kv(&report));

    if !report.pass {
        let worst = report
            .tensors
            .iter()
            .filter(|t| !t.pass)
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
            .expect("a failing report names at least one failing tensor");
        bail!(
            "gradient check FAILED: {} of {} tensors exceed tolerance {:e}; worst is {} \
             (relative error {:.3e} at flat index {})",
            report.tensors.iter().filter(|t| !t.pass).count(),
            report.tensors.len(),
            settings.tolerance,
            worst.name,
            worst.max_relative_error,
            worst.worst_index
        );
    }
    Ok(())
}
