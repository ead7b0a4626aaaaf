use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::client::{Account, Gateway};
use crate::metrics::{summarize, MetricsError, MetricsSummary, TimingSample};
use crate::plan::{BenchPlan, Target};

const EVENT: &str = "weightEvent";
const PASSWORD: &str = "bench-password";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("gateway at {url} is unreachable: {detail}")]
    TargetUnreachable { url: String, detail: String },
    #[error("fixture setup failed: {0}")]
    FixtureSetupFailed(String),
    #[error("{target} step n={n} repeat {repeat} failed: {detail}")]
    StepFailed { target: String, n: u64, repeat: u32, detail: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchResults {
    pub samples: Vec<TimingSample>,
    pub summaries: Vec<MetricsSummary>,
}

impl BenchResults {
    pub fn extend(&mut self, other: BenchResults) {
        self.samples.extend(other.samples);
        self.summaries.extend(other.summaries);
    }
}

fn weight_body(i: u64) -> Vec<u8> {
    format!(
        r#"{{"eventType":"{EVENT}","payload":{{"animalId":"bench-{i}","eventDateTime":"2024-01-01T00:00:00Z","weightKg":{}}}}}"#,
        300 + i % 200
    )
    .into_bytes()
}

/// Services the harness creates and must remove afterwards.
struct Fixture {
    tag: String,
    producer: Option<Account>,
    consumers: Vec<Account>,
}

impl Fixture {
    fn new() -> Self {
        Self { tag: format!("{:08x}", rand::thread_rng().gen::<u32>()), producer: None, consumers: Vec::new() }
    }

    fn setup(&mut self, gw: &Gateway, plan: &BenchPlan) -> Result<(), String> {
        let consumers = match plan.target {
            Target::Validator | Target::Registration => return Ok(()),
            Target::Publish | Target::Consume => 1,
            Target::Mapping => plan.steps.iter().copied().max().unwrap_or(0),
        };
        self.producer = Some(gw.register(&format!("bench-{}-p", self.tag), PASSWORD, "producer")?);
        for i in 0..consumers {
            self.consumers.push(gw.register(&format!("bench-{}-c{i}", self.tag), PASSWORD, "consumer")?);
        }
        if matches!(plan.target, Target::Publish | Target::Consume) {
            gw.map(self.producer(), EVENT, &[self.consumers[0].id])?;
        }
        Ok(())
    }

    fn producer(&self) -> &Account {
        self.producer.as_ref().expect("fixture has a producer")
    }

    fn teardown(self, gw: &Gateway) -> Result<(), String> {
        let mut first_err = None;
        for acct in self.consumers.iter().chain(self.producer.iter()) {
            if let Err(e) = gw.delete_self(acct) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }
}

/// Splits `0..n` into `k` contiguous chunks and runs `work` on each in parallel.
fn fan_out(n: u64, k: usize, work: impl Fn(std::ops::Range<u64>) -> Result<(), String> + Sync) -> Result<(), String> {
    if k <= 1 {
        return work(0..n);
    }
    let k = k as u64;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|w| {
                let work = &work;
                let range = (n * w / k)..(n * (w + 1) / k);
                s.spawn(move || work(range))
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().unwrap_or_else(|_| Err("worker panicked".into())))
    })
}

/// Runs every step of `plan`, calling `progress` after each timed repeat.
pub fn run_bench(plan: &BenchPlan, mut progress: impl FnMut(&TimingSample)) -> Result<BenchResults, BenchError> {
    if plan.steps.is_empty() || plan.repeats == 0 || plan.concurrency == 0 || plan.consume_batch == 0 {
        return Err(BenchError::InvalidPlan("steps, repeats, concurrency and batch must be non-empty".into()));
    }
    let gw = Gateway::new(&plan.base_url).map_err(BenchError::FixtureSetupFailed)?;
    gw.probe().map_err(|e| BenchError::TargetUnreachable { url: plan.base_url.clone(), detail: e.to_string() })?;

    let mut fixture = Fixture::new();
    if let Err(e) = fixture.setup(&gw, plan) {
        let _ = fixture.teardown(&gw);
        return Err(BenchError::FixtureSetupFailed(e));
    }
    let outcome = run_steps(&gw, plan, &fixture, &mut progress);
    let cleanup = fixture.teardown(&gw);
    let results = outcome?;
    cleanup.map_err(|e| BenchError::FixtureSetupFailed(format!("teardown: {e}")))?;
    Ok(results)
}

fn run_steps(
    gw: &Gateway,
    plan: &BenchPlan,
    fixture: &Fixture,
    progress: &mut impl FnMut(&TimingSample),
) -> Result<BenchResults, BenchError> {
    let label = plan.label();
    let mut results = BenchResults::default();
    for &n in &plan.steps {
        let mut times = Vec::with_capacity(plan.repeats as usize);
        for repeat in 1..=plan.repeats {
            let fail = |detail: String| BenchError::StepFailed { target: label.clone(), n, repeat, detail };
            let t_ms = run_repeat(gw, plan, fixture, n, repeat).map_err(fail)?;
            let sample = TimingSample { target: label.clone(), n, repeat, t_ms };
            progress(&sample);
            times.push(t_ms);
            results.samples.push(sample);
        }
        results.summaries.push(summarize(&label, n, &times)?);
    }
    Ok(results)
}

/// One timed repeat. Preparation and cleanup around the timed section are
/// not counted.
fn run_repeat(gw: &Gateway, plan: &BenchPlan, fixture: &Fixture, n: u64, repeat: u32) -> Result<f64, String> {
    let k = plan.concurrency;
    match plan.target {
        Target::Validator => {
            let bodies: Vec<Vec<u8>> = (0..n).map(weight_body).collect();
            timed(|| fan_out(n, k, |r| r.into_iter().try_for_each(|i| gw.validate(&bodies[i as usize]))))
        }
        Target::Registration => {
            let names: Vec<String> = (0..n).map(|i| format!("bench-{}-r{n}-{repeat}-{i}", fixture.tag)).collect();
            let made = std::sync::Mutex::new(Vec::with_capacity(n as usize));
            let t = timed(|| {
                fan_out(n, k, |r| {
                    for i in r {
                        let role = if i % 2 == 0 { "producer" } else { "consumer" };
                        let acct = gw.register(&names[i as usize], PASSWORD, role)?;
                        made.lock().unwrap().push(acct);
                    }
                    Ok(())
                })
            });
            for acct in made.into_inner().unwrap() {
                gw.delete_self(&acct)?;
            }
            t
        }
        Target::Mapping => {
            let producer = fixture.producer();
            let consumers = &fixture.consumers[..n as usize];
            let t = timed(|| {
                fan_out(n, k, |r| r.into_iter().try_for_each(|i| gw.map(producer, EVENT, &[consumers[i as usize].id])))
            });
            gw.unmap_all(producer)?;
            t
        }
        Target::Publish => {
            let producer = fixture.producer();
            let bodies: Vec<Vec<u8>> = (0..n).map(weight_body).collect();
            let t = timed(|| {
                fan_out(n, k, |r| r.into_iter().try_for_each(|i| gw.publish(producer, EVENT, &bodies[i as usize])))
            });
            let drained = gw.drain(&fixture.consumers[0], 1000)?;
            if t.is_ok() && drained != n {
                return Err(format!("published {n} but drained {drained}"));
            }
            t
        }
        Target::Consume => {
            let producer = fixture.producer();
            let consumer = &fixture.consumers[0];
            for i in 0..n {
                gw.publish(producer, EVENT, &weight_body(i))?;
            }
            let total = AtomicU64::new(0);
            let t = timed(|| {
                fan_out(k as u64, k, |_| {
                    let got = gw.drain(consumer, plan.consume_batch)?;
                    total.fetch_add(got, Ordering::Relaxed);
                    Ok(())
                })
            });
            let total = total.into_inner();
            if t.is_ok() && total != n {
                return Err(format!("preloaded {n} but drained {total}"));
            }
            t
        }
    }
}

fn timed(f: impl FnOnce() -> Result<(), String>) -> Result<f64, String> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1000.0)
}
