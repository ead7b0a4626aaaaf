//! Acceptance criteria 1 to 10, end to end.
//!
//! Runs without the libtest harness so every criterion prints exactly one
//! PASS or FAIL line. Give criterion numbers as arguments to run a subset:
//! `cargo test -p leisa-gateway --test acceptance -- 4 6`. Randomized parts
//! use `ACCEPTANCE_SEED` (default 20240105).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, ExitCode, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use leisa_bench::{compute_metrics, emit_csv, run_bench, BenchPlan, BenchResults, TimingSample};
use leisa_core::domain::parse_envelope;
use leisa_core::fault::{FaultInjector, FaultPoint};
use leisa_core::registry::RegistryConfig;
use leisa_core::{Broker, Registry, SchemaRegistry, ServiceRole};
use leisa_gateway::{AdminConfig, GatewayConfig, RunningGateway, ROUTES};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::Method;
use serde_json::{json, Value};

const PW: &str = "acceptance-pw";
const ADMIN: (&str, &str) = ("admin", "admin-password");
/// Cheaper than the production default; registration speed is not under test.
const HASH_ITERATIONS: u32 = 1_000;

type Check = fn(&mut StdRng) -> Result<String>;

fn main() -> ExitCode {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seed: u64 = std::env::var("ACCEPTANCE_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(20240105);
    let criteria: [(u32, &str, Check); 10] = [
        (1, "metrics reproduction", metrics_reproduction),
        (2, "end-to-end routing", end_to_end_routing),
        (3, "validation accuracy", validation_accuracy),
        (4, "durability under SIGKILL", durability),
        (5, "permission matrix", permission_matrix),
        (6, "offline consumer", offline_consumer),
        (7, "publish scalability", scalability),
        (8, "bench protocol fidelity", protocol_fidelity),
        (9, "lei2json round trip", lei2json_round_trip),
        (10, "registration atomicity", registration_atomicity),
    ];
    // keep panic messages out of the summary; they are reported as FAIL lines
    panic::set_hook(Box::new(|_| {}));
    println!("acceptance (seed {seed})");
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let mut rng = StdRng::seed_from_u64(seed ^ u64::from(n));
        let start = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(|| check(&mut rng))) {
            Ok(r) => r,
            Err(p) => Err(anyhow!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} ({secs:.1} s)"),
            Err(e) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {e:#} ({secs:.1} s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn start_gateway(root: &Path) -> Result<RunningGateway> {
    let config = GatewayConfig {
        listen: "127.0.0.1:0".parse()?,
        storage_root: root.to_path_buf(),
        bootstrap_admin: Some(AdminConfig { username: ADMIN.0.into(), password: ADMIN.1.into() }),
        password_hash_iterations: HASH_ITERATIONS,
        ..GatewayConfig::default()
    };
    RunningGateway::start(&config)
}

#[derive(Debug, Clone)]
struct Svc {
    id: u64,
    user: String,
    pass: String,
}

#[derive(Clone)]
struct Http {
    client: Client,
    base: String,
}

impl Http {
    fn new(base: &str) -> Self {
        let client = Client::builder().timeout(Duration::from_secs(60)).build().expect("client builds");
        Self { client, base: base.to_owned() }
    }

    fn req(&self, method: Method, path: &str) -> RequestBuilder {
        self.client.request(method, format!("{}{}", self.base, path))
    }

    fn as_svc(&self, who: &Svc, method: Method, path: &str) -> RequestBuilder {
        self.req(method, path).basic_auth(&who.user, Some(&who.pass))
    }

    fn admin(&self) -> Result<Svc> {
        let resp = self
            .req(Method::POST, "/services/login")
            .json(&json!({"username": ADMIN.0, "password": ADMIN.1}))
            .send()?;
        let body: Value = ok(resp)?.json()?;
        Ok(Svc { id: body["serviceId"].as_u64().context("serviceId")?, user: ADMIN.0.into(), pass: ADMIN.1.into() })
    }

    fn register(&self, user: &str, role: &str) -> Result<Svc> {
        let resp = self
            .req(Method::POST, "/services")
            .json(&json!({"username": user, "password": PW, "role": role}))
            .send()?;
        ensure!(resp.status() == 201, "register {user}: HTTP {}", resp.status());
        let body: Value = resp.json()?;
        Ok(Svc { id: body["serviceId"].as_u64().context("serviceId")?, user: user.into(), pass: PW.into() })
    }

    fn map(&self, producer: &Svc, event: &str, consumers: &[u64]) -> Result<()> {
        let resp = self
            .as_svc(producer, Method::POST, "/mappings")
            .json(&json!({"eventType": event, "consumerIds": consumers}))
            .send()?;
        ok(resp).map(drop)
    }

    fn publish(&self, producer: &Svc, event: &str, payload: &Value) -> Result<Response> {
        let body = json!({"eventType": event, "payload": payload});
        Ok(self.as_svc(producer, Method::POST, &format!("/publish/{event}")).json(&body).send()?)
    }

    fn fetch(&self, consumer: &Svc, max: usize, wait: f64) -> Result<Vec<Value>> {
        let resp = self.as_svc(consumer, Method::GET, &format!("/consume?max={max}&wait={wait}")).send()?;
        let body: Value = ok(resp)?.json()?;
        body["messages"].as_array().cloned().context("messages")
    }

    fn ack(&self, consumer: &Svc, ids: &[u64]) -> Result<()> {
        let resp = self.as_svc(consumer, Method::POST, "/consume/ack").json(&json!({"messageIds": ids})).send()?;
        ok(resp).map(drop)
    }

    /// Fetches and acks until the queue is empty.
    fn drain(&self, consumer: &Svc) -> Result<Vec<Value>> {
        let mut out = Vec::new();
        loop {
            let batch = self.fetch(consumer, 1000, 0.0)?;
            if batch.is_empty() {
                return Ok(out);
            }
            self.ack(consumer, &message_ids(&batch))?;
            out.extend(batch);
        }
    }
}

fn ok(resp: Response) -> Result<Response> {
    if resp.status().is_success() {
        Ok(resp)
    } else {
        let status = resp.status();
        bail!("HTTP {status}: {}", resp.text().unwrap_or_default())
    }
}

fn message_ids(msgs: &[Value]) -> Vec<u64> {
    msgs.iter().filter_map(|m| m["messageId"].as_u64()).collect()
}

fn seqs(msgs: &[Value]) -> Vec<u64> {
    msgs.iter().filter_map(|m| m["event"]["payload"]["seq"].as_u64()).collect()
}

fn weight(seq: u64) -> Value {
    json!({
        "animalId": format!("AU{seq:06}"),
        "eventDateTime": "2024-01-05T06:00:00Z",
        "weightKg": 250 + seq % 300,
        "seq": seq,
    })
}

// ---------------------------------------------------------------------------
// 1

fn metrics_reproduction(_: &mut StdRng) -> Result<String> {
    let times = [702.0, 703.0, 840.0, 711.0, 694.0, 697.0, 707.0, 704.0, 747.0, 707.0];
    let samples: Vec<TimingSample> = times
        .iter()
        .enumerate()
        .map(|(i, &t)| TimingSample { target: "validator".into(), n: 1000, repeat: i as u32 + 1, t_ms: t })
        .collect();
    let s = compute_metrics(&samples)?;
    ensure!((s.mean_ms - 721.2).abs() < 1e-9, "mean {}", s.mean_ms);
    ensure!((s.stddev_ms - 44.23).abs() <= 0.01, "sd {}", s.stddev_ms);
    ensure!((s.cv_pct - 6.13).abs() <= 0.01, "cv {}", s.cv_pct);
    ensure!((s.throughput_per_s - 1386.6).abs() <= 0.1, "throughput {}", s.throughput_per_s);
    Ok(format!(
        "mean {:.1} ms, sd {:.2} ms, cv {:.2} %, throughput {:.1} events/s",
        s.mean_ms, s.stddev_ms, s.cv_pct, s.throughput_per_s
    ))
}

// ---------------------------------------------------------------------------
// 2

fn end_to_end_routing(_: &mut StdRng) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let gw = start_gateway(dir.path())?;
    let http = Http::new(&gw.base_url());
    let p = http.register("farm", "producer")?;
    let c1 = http.register("vet", "consumer")?;
    let c2 = http.register("abattoir", "consumer")?;
    let c3 = http.register("insurer", "consumer")?;
    http.map(&p, "weightEvent", &[c1.id, c2.id])?;
    for i in 0..1000 {
        ok(http.publish(&p, "weightEvent", &weight(i))?).with_context(|| format!("publish {i}"))?;
    }
    let schemas = SchemaRegistry::builtin();
    let mut counts = Vec::new();
    for (c, expected) in [(&c1, 1000u64), (&c2, 1000), (&c3, 0)] {
        let msgs = http.drain(c)?;
        ensure!(msgs.len() as u64 == expected, "{} drained {} messages, expected {expected}", c.user, msgs.len());
        ensure!(seqs(&msgs) == (0..expected).collect::<Vec<_>>(), "{} received messages out of publish order", c.user);
        for m in &msgs {
            let env = parse_envelope(m["event"].to_string().as_bytes())?;
            ensure!(schemas.validate(&env).is_valid(), "{} holds an invalid event", c.user);
        }
        // nothing arrives late either
        ensure!(http.fetch(c, 10, 0.5)?.is_empty(), "{} got extra messages", c.user);
        counts.push(msgs.len());
    }
    Ok(format!("drained c1={} c2={} c3={}, each in publish order", counts[0], counts[1], counts[2]))
}

// ---------------------------------------------------------------------------
// 3

struct Case {
    event: &'static str,
    payload: Value,
    /// (path, rule) the validator must report, or None for a valid payload.
    expect: Option<(String, &'static str)>,
}

const EVENTS: [&str; 3] = ["weightEvent", "treatmentEvent", "locationEvent"];

fn required_fields(event: &str) -> &'static [&'static str] {
    match event {
        "weightEvent" => &["animalId", "eventDateTime", "weightKg"],
        "treatmentEvent" => &["animalId", "eventDateTime", "treatment"],
        _ => &["animalId", "eventDateTime", "latitude", "longitude"],
    }
}

fn random_timestamp(rng: &mut StdRng) -> String {
    let secs = rng.gen_range(946_684_800i64..2_000_000_000);
    let t = chrono::DateTime::from_timestamp(secs, 0).expect("in range");
    match rng.gen_range(0..3) {
        0 => t.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        1 => format!("{}.{:03}Z", t.format("%Y-%m-%dT%H:%M:%S"), rng.gen_range(0..1000)),
        _ => format!("{}{:+03}:30", t.format("%Y-%m-%dT%H:%M:%S"), rng.gen_range(-11..12)),
    }
}

fn bounded(rng: &mut StdRng, lo: f64, hi: f64) -> Value {
    match rng.gen_range(0..10) {
        0 => json!(lo),
        1 => json!(hi),
        2 => json!(rng.gen_range(lo as i64..=hi as i64)),
        _ => json!(rng.gen_range(lo..hi)),
    }
}

fn valid_payload(event: &str, rng: &mut StdRng) -> Value {
    let mut p = json!({
        "animalId": format!("{}{:08}", ["AU", "NZ", "UK"].choose(rng).unwrap(), rng.gen_range(0..100_000_000)),
        "eventDateTime": random_timestamp(rng),
    });
    let obj = p.as_object_mut().unwrap();
    match event {
        "weightEvent" => {
            obj.insert("weightKg".into(), bounded(rng, 0.0, 1500.0));
        }
        "treatmentEvent" => {
            obj.insert(
                "treatment".into(),
                json!(["drench", "vaccine", "antibiotic", "vitamin B12"].choose(rng).unwrap()),
            );
            if rng.gen_bool(0.5) {
                obj.insert("doseMl".into(), bounded(rng, 0.0, 250.0));
            }
        }
        _ => {
            obj.insert("latitude".into(), bounded(rng, -90.0, 90.0));
            obj.insert("longitude".into(), bounded(rng, -180.0, 180.0));
        }
    }
    if rng.gen_bool(0.2) {
        obj.insert("note".into(), json!("extra fields are allowed"));
    }
    p
}

/// Applies mutation `kind` (0 missing required, 1 wrong scalar type,
/// 2 out of range, 3 malformed timestamp) and names the expected violation.
fn mutate(event: &str, payload: &mut Value, kind: usize, rng: &mut StdRng) -> (String, &'static str) {
    let obj = payload.as_object_mut().unwrap();
    match kind {
        0 => {
            let field = *required_fields(event).choose(rng).unwrap();
            obj.remove(field);
            (format!("$.{field}"), "required")
        }
        1 => {
            let field = *required_fields(event).choose(rng).unwrap();
            let replacement = match obj[field] {
                Value::String(_) => json!(rng.gen_range(0..1000)),
                _ => json!(format!("{}", rng.gen_range(0..1000))),
            };
            obj.insert(field.into(), replacement);
            (format!("$.{field}"), "type")
        }
        2 => {
            let (field, lo, hi) = match event {
                "weightEvent" => ("weightKg", 0.0, f64::INFINITY),
                "treatmentEvent" => ("doseMl", 0.0, f64::INFINITY),
                _ => *[("latitude", -90.0, 90.0), ("longitude", -180.0, 180.0)].choose(rng).unwrap(),
            };
            let excess = rng.gen_range(1e-6..500.0);
            if hi.is_finite() && rng.gen_bool(0.5) {
                obj.insert(field.into(), json!(hi + excess));
                (format!("$.{field}"), "maximum")
            } else {
                obj.insert(field.into(), json!(lo - excess));
                (format!("$.{field}"), "minimum")
            }
        }
        _ => {
            let bad = [
                "2024-13-01T00:00:00Z",
                "2024-01-05",
                "05/01/2024 06:00",
                "2024-01-05T25:00:00Z",
                "2024-01-05T06:00:00",
                "yesterday",
                "2024-02-30T06:00:00Z",
                "",
            ];
            obj.insert("eventDateTime".into(), json!(bad.choose(rng).unwrap()));
            ("$.eventDateTime".into(), "format")
        }
    }
}

fn corpus(rng: &mut StdRng) -> Vec<Case> {
    let mut cases = Vec::new();
    for event in EVENTS {
        for _ in 0..50 {
            cases.push(Case { event, payload: valid_payload(event, rng), expect: None });
        }
        for k in 0..50 {
            let mut payload = valid_payload(event, rng);
            let expect = mutate(event, &mut payload, k % 4, rng);
            cases.push(Case { event, payload, expect: Some(expect) });
        }
    }
    cases
}

fn validation_accuracy(rng: &mut StdRng) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let gw = start_gateway(dir.path())?;
    let http = Http::new(&gw.base_url());
    let cases = corpus(rng);
    let mut errors = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let resp = http
            .req(Method::POST, "/validate")
            .json(&json!({"eventType": case.event, "payload": case.payload}))
            .send()?;
        let status = resp.status().as_u16();
        let body: Value = resp.json()?;
        let reported: Vec<(String, String)> = body["violations"]
            .as_array()
            .map(|vs| {
                vs.iter()
                    .map(|v| (v["path"].as_str().unwrap_or("").to_owned(), v["rule"].as_str().unwrap_or("").to_owned()))
                    .collect()
            })
            .unwrap_or_default();
        let correct = match &case.expect {
            None => status == 200 && reported.is_empty(),
            Some((path, rule)) => status == 422 && reported == [(path.clone(), rule.to_string())],
        };
        if !correct {
            errors.push(format!(
                "case {i} {} {}: HTTP {status} {reported:?}, expected {:?}",
                case.event, case.payload, case.expect
            ));
        }
    }
    ensure!(errors.is_empty(), "{} misclassified, first: {}", errors.len(), errors[0]);
    let invalid = cases.iter().filter(|c| c.expect.is_some()).count();
    Ok(format!(
        "{} valid + {invalid} mutated cases over {} event types, 0 errors, paths exact",
        cases.len() - invalid,
        EVENTS.len()
    ))
}

// ---------------------------------------------------------------------------
// 4

struct Proc {
    child: Child,
    _stdout: BufReader<ChildStdout>,
    base: String,
}

fn spawn_gateway(root: &Path) -> Result<Proc> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_leisa-gateway"))
        .env_clear()
        .env("LEISA_LISTEN", "127.0.0.1:0")
        .env("LEISA_STORAGE_ROOT", root)
        .env("LEISA_PASSWORD_HASH_ITERATIONS", HASH_ITERATIONS.to_string())
        .env("LEISA_LOG", "error")
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .context("spawning gateway")?;
    let mut stdout = BufReader::new(child.stdout.take().context("stdout")?);
    let mut line = String::new();
    stdout.read_line(&mut line)?;
    let addr = line.trim().strip_prefix("listening on ").with_context(|| format!("unexpected banner {line:?}"))?;
    Ok(Proc { child, _stdout: stdout, base: format!("http://{addr}") })
}

fn sigkill(mut proc: Proc) -> Result<()> {
    // Child::kill sends SIGKILL on Unix: no shutdown hooks run
    proc.child.kill()?;
    proc.child.wait()?;
    Ok(())
}

#[derive(Default)]
struct TrialLog {
    /// seq values whose publish returned 200
    published: BTreeSet<u64>,
    /// seq values handed to the consumer before the kill
    fetched: BTreeSet<u64>,
    /// seq values whose ack returned 200
    acked: BTreeSet<u64>,
}

fn durability_trial(rng: &mut StdRng) -> Result<(usize, usize, usize)> {
    let dir = tempfile::tempdir()?;
    let proc = spawn_gateway(dir.path())?;
    let http = Http::new(&proc.base);
    let p = http.register("farm", "producer")?;
    let c = http.register("vet", "consumer")?;
    http.map(&p, "weightEvent", &[c.id])?;
    let log = Arc::new(Mutex::new(TrialLog::default()));
    for i in 0..500 {
        ok(http.publish(&p, "weightEvent", &weight(i))?)?;
        log.lock().unwrap().published.insert(i);
    }

    // Consume part of the backlog and ack a random subset of that.
    let fetched = http.fetch(&c, rng.gen_range(1..=500), 0.0)?;
    let to_ack: Vec<&Value> = fetched.iter().filter(|_| rng.gen_bool(0.6)).collect();
    let ids: Vec<u64> = to_ack.iter().filter_map(|m| m["messageId"].as_u64()).collect();
    log.lock().unwrap().fetched.extend(seqs(&fetched));
    http.ack(&c, &ids)?;
    log.lock().unwrap().acked.extend(to_ack.iter().filter_map(|m| m["event"]["payload"]["seq"].as_u64()));

    // Keep publishing and consuming while the kill lands.
    let mut workers = Vec::new();
    {
        let (http, p, log) = (http.clone(), p.clone(), Arc::clone(&log));
        workers.push(thread::spawn(move || {
            for i in 500.. {
                match http.publish(&p, "weightEvent", &weight(i)) {
                    Ok(r) if r.status() == 200 => log.lock().unwrap().published.insert(i),
                    _ => return,
                };
            }
        }));
    }
    {
        let (http, c, log) = (http.clone(), c.clone(), Arc::clone(&log));
        workers.push(thread::spawn(move || loop {
            let Ok(batch) = http.fetch(&c, 7, 0.0) else { return };
            log.lock().unwrap().fetched.extend(seqs(&batch));
            if http.ack(&c, &message_ids(&batch)).is_err() {
                return;
            }
            log.lock().unwrap().acked.extend(seqs(&batch));
        }));
    }
    thread::sleep(Duration::from_micros(rng.gen_range(0..40_000)));
    sigkill(proc)?;
    for w in workers {
        let _ = w.join();
    }

    let proc = spawn_gateway(dir.path())?;
    let http = Http::new(&proc.base);
    let after = seqs(&http.drain(&c)?);
    sigkill(proc)?;

    let log = log.lock().unwrap();
    let redelivered: BTreeSet<u64> = after.iter().copied().collect();
    ensure!(redelivered.len() == after.len(), "a message came back twice after restart");
    // A message counts as delivered once the consumer has it in hand; an ack
    // cut off by the kill may or may not have landed.
    let lost: Vec<u64> =
        log.published.iter().filter(|s| !log.fetched.contains(s) && !redelivered.contains(s)).copied().collect();
    ensure!(lost.is_empty(), "{} confirmed messages lost, e.g. seq {}", lost.len(), lost[0]);
    let cut_off = log.published.iter().filter(|s| !log.acked.contains(s) && !redelivered.contains(s)).count();
    let zombie: Vec<&u64> = log.acked.intersection(&redelivered).collect();
    ensure!(zombie.is_empty(), "acked messages redelivered: {zombie:?}");
    Ok((log.published.len(), after.len(), cut_off))
}

fn durability(rng: &mut StdRng) -> Result<String> {
    let mut total = 0;
    let mut recovered = 0;
    let mut cut_off = 0;
    for trial in 0..20 {
        let (published, after, cut) = durability_trial(rng).with_context(|| format!("trial {trial}"))?;
        total += published;
        recovered += after;
        cut_off += cut;
    }
    Ok(format!(
        "20 kill trials, {total} confirmed publishes, {recovered} recovered after restart, \
         {cut_off} consumed under an ack the kill cut off, 0 lost"
    ))
}

// ---------------------------------------------------------------------------
// 5

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Allow,
    Unauth,
    Deny,
}
use Outcome::{Allow, Deny, Unauth};

const ROLES: [&str; 4] = ["anonymous", "producer", "consumer", "admin"];

/// Operation → expected outcome for anonymous, producer, consumer, admin.
const MATRIX: [(&str, [Outcome; 4]); 19] = [
    ("ServiceRegistration", [Allow, Allow, Allow, Allow]),
    ("ServiceLogin", [Allow, Allow, Allow, Allow]),
    ("DeleteService(self)", [Unauth, Allow, Allow, Allow]),
    ("DeleteService(other)", [Unauth, Deny, Deny, Allow]),
    ("FindService", [Unauth, Allow, Allow, Allow]),
    ("ListAllServices", [Unauth, Deny, Deny, Allow]),
    ("ListService", [Unauth, Allow, Allow, Allow]),
    ("MessageValidator", [Allow, Allow, Allow, Allow]),
    ("PublishMessage", [Unauth, Allow, Deny, Allow]),
    ("UpdateService(self)", [Unauth, Allow, Allow, Allow]),
    ("UpdateService(other)", [Unauth, Deny, Deny, Allow]),
    ("SetQueueMapping", [Unauth, Allow, Deny, Allow]),
    ("GetQueueMapping", [Unauth, Allow, Allow, Allow]),
    ("UpdateQueueMapping", [Unauth, Allow, Deny, Allow]),
    ("DeleteQueueMapping", [Unauth, Allow, Deny, Allow]),
    ("ConsumeMessage(fetch)", [Unauth, Deny, Allow, Deny]),
    ("ConsumeMessage(ack)", [Unauth, Deny, Allow, Deny]),
    ("ConsumeMessage(stream)", [Unauth, Deny, Allow, Deny]),
    ("ConsumeMessage(foreign queue)", [Unauth, Deny, Deny, Deny]),
];

struct World {
    http: Http,
    admin: Svc,
    producer: Svc,
    consumer: Svc,
    other_consumer: Svc,
    fresh: Mutex<u32>,
}

impl World {
    fn fresh(&self, role: usize) -> Result<Option<Svc>> {
        let n = {
            let mut g = self.fresh.lock().unwrap();
            *g += 1;
            *g
        };
        let name = format!("fresh-{n}");
        Ok(match role {
            0 => None,
            1 => Some(self.http.register(&name, "producer")?),
            2 => Some(self.http.register(&name, "consumer")?),
            _ => {
                let resp = self
                    .http
                    .as_svc(&self.admin, Method::POST, "/services")
                    .json(&json!({"username": name, "password": PW, "role": "producer", "isAdmin": true}))
                    .send()?;
                let body: Value = ok(resp)?.json()?;
                ensure!(body["isAdmin"] == true, "admin grant failed");
                Some(Svc { id: body["serviceId"].as_u64().context("id")?, user: name, pass: PW.into() })
            }
        })
    }

    fn caller(&self, role: usize) -> Option<Svc> {
        match role {
            0 => None,
            1 => Some(self.producer.clone()),
            2 => Some(self.consumer.clone()),
            _ => Some(self.admin.clone()),
        }
    }

    fn call(&self, op: &str, role: usize) -> Result<(u16, Value)> {
        let mut who = self.caller(role);
        let (method, path, body): (Method, String, Option<Value>) = match op {
            "ServiceRegistration" => {
                let n = {
                    let mut g = self.fresh.lock().unwrap();
                    *g += 1;
                    *g
                };
                (
                    Method::POST,
                    "/services".into(),
                    Some(json!({"username": format!("reg-{n}"), "password": PW, "role": "consumer"})),
                )
            }
            "ServiceLogin" => {
                (Method::POST, "/services/login".into(), Some(json!({"username": self.producer.user, "password": PW})))
            }
            "DeleteService(self)" | "UpdateService(self)" => {
                let me = self.fresh(role)?;
                let id = me.as_ref().map_or(self.consumer.id, |s| s.id);
                who = me;
                if op.starts_with("Delete") {
                    (Method::DELETE, format!("/services/{id}"), None)
                } else {
                    (Method::PUT, format!("/services/{id}"), Some(json!({"password": "a-new-password"})))
                }
            }
            "DeleteService(other)" | "UpdateService(other)" => {
                let victim = self.fresh(2)?.expect("consumer");
                if op.starts_with("Delete") {
                    (Method::DELETE, format!("/services/{}", victim.id), None)
                } else {
                    (Method::PUT, format!("/services/{}", victim.id), Some(json!({"password": "a-new-password"})))
                }
            }
            "FindService" => (Method::GET, format!("/services/{}", self.other_consumer.id), None),
            "ListAllServices" => (Method::GET, "/services/all".into(), None),
            "ListService" => (Method::GET, "/services".into(), None),
            "MessageValidator" => {
                (Method::POST, "/validate".into(), Some(json!({"eventType": "weightEvent", "payload": weight(1)})))
            }
            "PublishMessage" => (
                Method::POST,
                "/publish/weightEvent".into(),
                Some(json!({"eventType": "weightEvent", "payload": weight(2)})),
            ),
            "SetQueueMapping" | "UpdateQueueMapping" => (
                if op.starts_with("Set") { Method::POST } else { Method::PUT },
                "/mappings".into(),
                Some(json!({"eventType": "weightEvent", "consumerIds": [self.consumer.id]})),
            ),
            "GetQueueMapping" => (Method::GET, "/mappings".into(), None),
            "DeleteQueueMapping" => (Method::DELETE, "/mappings?eventType=weightEvent".into(), None),
            "ConsumeMessage(fetch)" => (Method::GET, "/consume?wait=0".into(), None),
            "ConsumeMessage(ack)" => (Method::POST, "/consume/ack".into(), Some(json!({"messageIds": []}))),
            "ConsumeMessage(stream)" => (Method::GET, "/consume/stream".into(), None),
            "ConsumeMessage(foreign queue)" => {
                (Method::GET, format!("/consume?wait=0&queue=svc-{}", self.other_consumer.id), None)
            }
            other => bail!("no request for {other}"),
        };
        let mut req = match &who {
            Some(s) => self.http.as_svc(s, method, &path),
            None => self.http.req(method, &path),
        };
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send()?;
        let status = resp.status().as_u16();
        let text = resp.text()?;
        Ok((status, serde_json::from_str(&text).unwrap_or(Value::Null)))
    }
}

fn classify(op: &str, status: u16, body: &Value) -> Option<Outcome> {
    match status {
        200..=299 => Some(Allow),
        401 => Some(Unauth),
        403 => Some(Deny),
        // a plain GET cannot complete the upgrade; getting that far means the
        // caller passed the checks
        _ if op == "ConsumeMessage(stream)" && body["error"] == "UpgradeRequired" => Some(Allow),
        _ => None,
    }
}

fn permission_matrix(_: &mut StdRng) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let gw = start_gateway(dir.path())?;
    let http = Http::new(&gw.base_url());
    let world = World {
        admin: http.admin()?,
        producer: http.register("farm", "producer")?,
        consumer: http.register("vet", "consumer")?,
        other_consumer: http.register("abattoir", "consumer")?,
        http: http.clone(),
        fresh: Mutex::new(0),
    };
    http.map(&world.producer, "weightEvent", &[world.consumer.id])?;

    let mut mismatches = Vec::new();
    let mut cells = 0;
    for (op, expected) in MATRIX {
        for (role, want) in expected.iter().enumerate() {
            cells += 1;
            let (status, body) = world.call(op, role)?;
            let got = classify(op, status, &body);
            if got != Some(*want) {
                mismatches.push(format!("{op} as {}: HTTP {status} {body}, expected {want:?}", ROLES[role]));
            }
        }
    }

    // Straight from the route table: auth-required routes refuse anonymous
    // and wrongly authenticated calls; the others accept anonymous ones.
    let id = world.consumer.id;
    let mut routes = 0;
    for (method, path, auth, name) in ROUTES {
        let path = path.replace("{id}", &id.to_string()).replace("{eventType}", "weightEvent");
        let body = match name {
            "ServiceRegistration" => json!({"username": format!("route-{routes}"), "password": PW, "role": "producer"}),
            "ServiceLogin" => json!({"username": world.producer.user, "password": PW}),
            _ => json!({"eventType": "weightEvent", "payload": weight(3)}),
        };
        routes += 1;
        let anon = http.req(method.clone(), &path).json(&body).send()?.status().as_u16();
        if auth {
            let bad =
                http.req(method.clone(), &path).basic_auth(&world.producer.user, Some("not-the-password")).send()?;
            if anon != 401 || bad.status() != 401 {
                mismatches.push(format!("{name} {method} {path}: anonymous {anon}, bad password {}", bad.status()));
            }
        } else if !(200..300).contains(&anon) {
            mismatches.push(format!("{name} {method} {path}: anonymous call refused with {anon}"));
        }
    }
    ensure!(mismatches.is_empty(), "{} mismatches: {}", mismatches.len(), mismatches.join("; "));
    Ok(format!("{cells} role x operation cells and {routes} route-table rows as expected"))
}

// ---------------------------------------------------------------------------
// 6

fn offline_consumer(_: &mut StdRng) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let gw = start_gateway(dir.path())?;
    let producer_http = Http::new(&gw.base_url());
    let p = producer_http.register("farm", "producer")?;
    let c = producer_http.register("vet", "consumer")?;
    producer_http.map(&p, "weightEvent", &[c.id])?;

    // The consumer is online: it long-polls, sees one message, and then leaves.
    let online = {
        let (http, c) = (Http::new(&gw.base_url()), c.clone());
        thread::spawn(move || -> Result<Vec<Value>> {
            let msgs = http.fetch(&c, 10, 30.0)?;
            http.ack(&c, &message_ids(&msgs))?;
            Ok(msgs)
        })
    };
    thread::sleep(Duration::from_millis(200));
    ok(producer_http.publish(&p, "weightEvent", &weight(1_000_000))?)?;
    let first = online.join().map_err(|_| anyhow!("consumer thread panicked"))??;
    ensure!(seqs(&first) == [1_000_000], "online consumer saw {:?}", seqs(&first));
    let went_offline = Instant::now();

    // 1,000 publishes spread over more than 10 s with nobody listening.
    for i in 0..1000 {
        ok(producer_http.publish(&p, "weightEvent", &weight(i))?)?;
        thread::sleep(Duration::from_millis(10));
    }
    while went_offline.elapsed() < Duration::from_secs(10) {
        thread::sleep(Duration::from_millis(50));
    }
    let offline = went_offline.elapsed();

    // A brand new client session picks everything up.
    let http = Http::new(&gw.base_url());
    let mut got = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(30);
    while got.len() < 1000 && Instant::now() < deadline {
        let batch = http.fetch(&c, 250, 1.0)?;
        http.ack(&c, &message_ids(&batch))?;
        got.extend(seqs(&batch));
    }
    ensure!(got == (0..1000).collect::<Vec<_>>(), "retrieved {} of 1000 (or out of order)", got.len());
    ensure!(http.fetch(&c, 10, 0.0)?.is_empty(), "unexpected extra messages");
    Ok(format!("offline {:.1} s, 1000/1000 retrieved in order after reconnect", offline.as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 7 and 8 share one run of the default bench sweep

struct Sweep {
    results: BenchResults,
    samples_csv: String,
    summary_csv: String,
}

fn sweep() -> Result<&'static Sweep> {
    static SWEEP: OnceLock<Result<Sweep, String>> = OnceLock::new();
    SWEEP.get_or_init(|| run_sweep().map_err(|e| format!("{e:#}"))).as_ref().map_err(|e| anyhow!("sweep failed: {e}"))
}

fn run_sweep() -> Result<Sweep> {
    let dir = tempfile::tempdir()?;
    let gw = start_gateway(&dir.path().join("data"))?;
    let mut results = BenchResults::default();
    for target in leisa_bench::Target::ALL {
        // exactly what the CLI does with no flags
        let plan = BenchPlan::new(target, gw.base_url());
        eprintln!("  sweep: {} steps {:?} x {} repeats", plan.label(), plan.steps, plan.repeats);
        results.extend(run_bench(&plan, |_| {})?);
    }
    let out = dir.path().join("results.csv");
    let summary = emit_csv(&results.samples, &results.summaries, &out)?;
    Ok(Sweep { results, samples_csv: std::fs::read_to_string(&out)?, summary_csv: std::fs::read_to_string(summary)? })
}

fn scalability(_: &mut StdRng) -> Result<String> {
    let sweep = sweep()?;
    let publish: BTreeMap<u64, _> =
        sweep.results.summaries.iter().filter(|s| s.target == "publish").map(|s| (s.n, s)).collect();
    let first = publish.get(&1000).context("no n=1000 publish step")?;
    let last = publish.get(&10_000).context("no n=10000 publish step")?;
    let ratio = last.throughput_per_s / first.throughput_per_s;
    let worst = publish.values().map(|s| (s.n, s.cv_pct)).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure!(ratio >= 0.5, "throughput at 10000 is {:.1} % of that at 1000", ratio * 100.0);
    ensure!(worst.1 < 25.0, "cv {:.2} % at n={}", worst.1, worst.0);
    Ok(format!(
        "throughput {:.0} -> {:.0} msg/s ({:.0} %), max cv {:.2} % at n={}",
        first.throughput_per_s,
        last.throughput_per_s,
        ratio * 100.0,
        worst.1,
        worst.0
    ))
}

fn protocol_fidelity(_: &mut StdRng) -> Result<String> {
    let sweep = sweep()?;
    let mut lines = sweep.samples_csv.lines();
    ensure!(lines.next() == Some("target,n,repeat,t_ms"), "sample header");
    let mut cells: BTreeMap<String, BTreeMap<u64, BTreeSet<u32>>> = BTreeMap::new();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 4, "bad sample row {line}");
        let t: f64 = f[3].parse()?;
        ensure!(t.is_finite() && t > 0.0, "bad time in {line}");
        ensure!(
            cells.entry(f[0].into()).or_default().entry(f[1].parse()?).or_default().insert(f[2].parse()?),
            "duplicate {line}"
        );
        rows += 1;
    }
    let targets: Vec<&str> = cells.keys().map(String::as_str).collect();
    ensure!(targets == ["consume", "mapping", "publish", "registration", "validator"], "targets {targets:?}");
    for (target, steps) in &cells {
        ensure!(steps.len() == 10, "{target}: {} steps", steps.len());
        for (n, repeats) in steps {
            ensure!(*repeats == (1..=10).collect::<BTreeSet<u32>>(), "{target} n={n}: repeats {repeats:?}");
        }
    }

    let mut lines = sweep.summary_csv.lines();
    ensure!(lines.next() == Some("target,n,mean_ms,stddev_ms,throughput_per_s,cv_pct"), "summary header");
    let mut summaries = 0;
    let mut worst: f64 = 0.0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 6, "bad summary row {line}");
        let n: f64 = f[1].parse()?;
        let (mean, sd, tp, cv): (f64, f64, f64, f64) = (f[2].parse()?, f[3].parse()?, f[4].parse()?, f[5].parse()?);
        let e1 = rel(cv * mean / 100.0, sd);
        let e2 = rel(tp * mean / 1000.0, n);
        ensure!(e1 <= 1e-9 && e2 <= 1e-9, "{line}: relative errors {e1:e}, {e2:e}");
        worst = worst.max(e1).max(e2);
        summaries += 1;
    }
    ensure!(summaries == 50, "{summaries} summary rows");
    Ok(format!("{rows} sample rows (5 targets x 10 steps x 10 repeats), {summaries} summaries, worst identity error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 9

fn lei2json_round_trip(rng: &mut StdRng) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut text = String::from("animalId,eventDateTime,weightKg\n");
    let mut expected = Vec::new();
    for i in 0..1000 {
        let id = format!("AU{i:06}");
        let (cell, stamp) = if rng.gen_bool(0.5) {
            let d = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(rng.gen_range(0..365));
            (d.to_string(), format!("{d}T00:00:00Z"))
        } else {
            let s = random_timestamp(rng);
            (s.clone(), s)
        };
        let kg = (rng.gen_range(0.0..1500.0f64) * 10.0).round() / 10.0;
        text.push_str(&format!("{id},{cell},{kg}\n"));
        expected.push((id, stamp, kg));
    }
    let csv = dir.path().join("weights.csv");
    std::fs::write(&csv, text)?;

    let schemas = SchemaRegistry::builtin();
    let conv = lei2json::convert(&csv, "weightEvent", None, &schemas)?;
    ensure!(conv.errors.is_empty(), "{} row errors, first {:?}", conv.errors.len(), conv.errors.first());
    ensure!(conv.envelopes.len() == 1000, "{} envelopes", conv.envelopes.len());
    for (row, (id, stamp, kg)) in conv.envelopes.iter().zip(&expected) {
        ensure!(schemas.validate(&row.envelope).is_valid(), "row {} does not validate", row.row);
        let p = &row.envelope.payload;
        ensure!(
            p["animalId"] == id.as_str() && p["eventDateTime"] == stamp.as_str() && p["weightKg"].as_f64() == Some(*kg),
            "row {} payload {p:?}",
            row.row
        );
    }

    let gw = start_gateway(&dir.path().join("data"))?;
    let http = Http::new(&gw.base_url());
    let p = http.register("farm", "producer")?;
    let c1 = http.register("vet", "consumer")?;
    let c2 = http.register("abattoir", "consumer")?;
    http.map(&p, "weightEvent", &[c1.id, c2.id])?;
    let target = lei2json::Target::new(&gw.base_url(), &p.user, PW);
    let summary = lei2json::convert_and_publish(&csv, "weightEvent", None, &schemas, &target)?;
    ensure!(
        (summary.converted, summary.validated, summary.published, summary.failed()) == (1000, 1000, 1000, 0),
        "summary converted {} validated {} published {} failed {}",
        summary.converted,
        summary.validated,
        summary.published,
        summary.failed()
    );
    for c in [&c1, &c2] {
        let msgs = http.drain(c)?;
        let ids: BTreeSet<&str> = msgs.iter().filter_map(|m| m["event"]["payload"]["animalId"].as_str()).collect();
        ensure!(msgs.len() == 1000 && ids.len() == 1000, "{} received {} ({} distinct)", c.user, msgs.len(), ids.len());
    }
    Ok("1000 rows -> 1000 valid envelopes, 0 row errors; 1000 delivered to each of 2 consumers".into())
}

// ---------------------------------------------------------------------------
// 10

fn registration_atomicity(_: &mut StdRng) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let faults = Arc::new(FaultInjector::new());
    let broker = Arc::new(Broker::open_with_faults(dir.path().join("broker"), Arc::clone(&faults))?);
    let reg =
        Registry::open(&dir.path().join("registry.db"), broker, RegistryConfig { hash_iterations: HASH_ITERATIONS })?
            .with_faults(Arc::clone(&faults));
    let admin = reg.ensure_bootstrap_admin(ADMIN.0, ADMIN.1)?;
    reg.register_service(None, "farm", PW, ServiceRole::Producer, false)?;
    reg.register_service(None, "vet", PW, ServiceRole::Consumer, false)?;

    let check = |reg: &Registry, point: FaultPoint| -> Result<()> {
        let records = reg.list_all_services(&admin)?;
        let names: BTreeSet<String> = records.iter().map(|s| s.username.clone()).collect();
        let queues: BTreeSet<String> =
            records.iter().filter_map(|s| s.queue_name.as_ref().map(|q| q.to_string())).collect();
        let broker = reg.broker();
        let broker_users: BTreeSet<String> = broker.users().into_iter().map(|u| u.username).collect();
        let broker_queues: BTreeSet<String> = broker.queue_names().into_iter().map(|q| q.to_string()).collect();
        ensure!(!names.iter().any(|n| n.starts_with("victim")), "{point:?}: partial record {names:?}");
        ensure!(broker_users == names, "{point:?}: broker users {broker_users:?} vs records {names:?}");
        ensure!(broker_queues == queues, "{point:?}: queues {broker_queues:?} vs records {queues:?}");
        Ok(())
    };

    for point in FaultPoint::ALL {
        let name = format!("victim-{point:?}").to_lowercase();
        faults.arm(point);
        let result = reg.register_service(None, &name, PW, ServiceRole::Consumer, false);
        faults.disarm_all();
        ensure!(result.is_err(), "{point:?}: registration succeeded despite the fault");
        check(&reg, point)?;
        // nothing left behind that would block a clean retry
        let again = reg.register_service(None, &name, PW, ServiceRole::Consumer, false)?;
        reg.delete_service(&admin, again.service_id)?;
        check(&reg, point)?;
    }
    Ok("faults at queue create, user create, registry insert and response: 0 partial records, 0 orphan queues, 0 orphan users".into())
}
