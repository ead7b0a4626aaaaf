use std::path::PathBuf;

use anyhow::bail;
use clap::Parser;
use leisa_bench::{emit_csv, parse_steps, run_bench, BenchPlan, BenchResults, Target};

#[derive(Debug, Parser)]
#[command(name = "leisa-bench", version, about = "Timed load steps against a running gateway")]
struct Args {
    /// validator, registration, mapping, publish, consume or all. Repeatable.
    #[arg(long = "target", value_delimiter = ',', default_value = "all")]
    targets: Vec<String>,
    /// Load steps as `start..end:step`; defaults depend on the target.
    #[arg(long)]
    steps: Option<String>,
    #[arg(long, default_value_t = BenchPlan::DEFAULT_REPEATS)]
    repeats: u32,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    base_url: String,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Parallel workers per step.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// Messages per consume request.
    #[arg(long, default_value_t = BenchPlan::DEFAULT_CONSUME_BATCH)]
    consume_batch: usize,
}

fn targets(raw: &[String]) -> anyhow::Result<Vec<Target>> {
    let mut out = Vec::new();
    for t in raw {
        if t == "all" {
            out.extend(Target::ALL);
        } else {
            out.push(t.parse()?);
        }
    }
    let mut seen = std::collections::HashSet::new();
    out.retain(|t| seen.insert(*t));
    if out.is_empty() {
        bail!("no targets given");
    }
    Ok(out)
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let steps = args.steps.as_deref().map(parse_steps).transpose()?;
    let mut results = BenchResults::default();
    for target in targets(&args.targets)? {
        let mut plan = BenchPlan::new(target, &args.base_url);
        if let Some(steps) = &steps {
            plan.steps = steps.clone();
        }
        plan.repeats = args.repeats;
        plan.concurrency = args.concurrency;
        plan.consume_batch = args.consume_batch;
        eprintln!("{}: steps {:?} x {} repeats", plan.label(), plan.steps, plan.repeats);
        let r = run_bench(&plan, |s| eprintln!("  {} n={} repeat={} t={:.3} ms", s.target, s.n, s.repeat, s.t_ms))?;
        results.extend(r);
    }
    let summary = emit_csv(&results.samples, &results.summaries, &args.out)?;
    println!("target,n,mean_ms,stddev_ms,throughput_per_s,cv_pct");
    for s in &results.summaries {
        println!("{},{},{:.3},{:.3},{:.1},{:.2}", s.target, s.n, s.mean_ms, s.stddev_ms, s.throughput_per_s, s.cv_pct);
    }
    eprintln!("wrote {} and {}", args.out.display(), summary.display());
    Ok(())
}
