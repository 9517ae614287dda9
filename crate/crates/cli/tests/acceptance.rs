//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any of them fails.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use bdmesh::experiment::{run_birthday_experiment, BirthdayTrialConfig};
use bdmesh::mesh::{classify_scheme, SchemeKind, SchemeParams};
use bdmesh::probability::{min_probes, success_probability, PortSpace};
use bdmesh::scenario::{bundled, ScenarioFile};
use bdmesh::traversal::PunchConfig;
use bdmesh::world::LinkOutcome;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const K: u32 = 64511;

type Check = Result<String, String>;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdmesh"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn bdmesh")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:?}, limit {limit:?}"))
}

/// Plain running product, no log space: the oracle for the library's sum.
fn product_oracle(k: u32, b: u32, a: u32) -> f64 {
    let mut q = 1.0f64;
    for i in 0..a {
        if k - i <= b {
            return 1.0;
        }
        q *= f64::from(k - b - i) / f64::from(k - i);
    }
    1.0 - q
}

fn product_threshold(k: u32, b: u32, target: f64) -> u32 {
    let mut q = 1.0f64;
    let mut a = 0;
    while 1.0 - q < target {
        q *= f64::from(k - b - a) / f64::from(k - a);
        a += 1;
    }
    a
}

fn table() -> Check {
    let start = Instant::now();
    let out = run(bin().args(["analyze", "table", "--open-ports", "256", "--rate", "100", "--durations", "5,10,15,20"]));
    ensure(out.status.success(), || format!("exit {:?}", out.status.code()))?;
    let text = String::from_utf8_lossy(&out.stdout);
    let published = [(500, 0.8641018), (1000, 0.9818191), (1500, 0.9976061), (2000, 0.9996899)];
    let rows: Vec<&str> = text.lines().skip(1).collect();
    ensure(rows.len() == published.len(), || format!("{} rows", rows.len()))?;
    let mut worst = 0.0f64;
    for (row, (probes, want)) in rows.iter().zip(published) {
        let cols: Vec<&str> = row.split(',').collect();
        ensure(cols[1] == probes.to_string(), || format!("row {row:?}: expected {probes} probes"))?;
        let got: f64 = cols[2].parse().map_err(|e| format!("{row:?}: {e}"))?;
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("A={probes}: {got} vs {want}"))?;
    }
    within_time(start, Duration::from_secs(1))?;
    Ok(format!("max abs error {worst:.1e}"))
}

fn short_budget() -> Check {
    let start = Instant::now();
    let space = PortSpace::default();
    let half = min_probes(space, 256, 0.5).map_err(|e| e.to_string())?;
    ensure(half == product_threshold(K, 256, 0.5), || format!("min_probes(0.5) = {half} disagrees with oracle"))?;
    ensure(half <= 200, || format!("min_probes(0.5) = {half} > 200"))?;
    let p = success_probability(space, 256, 2000).map_err(|e| e.to_string())?.value();
    ensure(p >= 0.999, || format!("P(2000) = {p}"))?;
    within_time(start, Duration::from_secs(1))?;
    Ok(format!("min_probes(0.5)={half}, P(2000)={p:.7}"))
}

fn thresholds() -> Check {
    // Frozen after the first verified run against the product oracle.
    const FROZEN: [(u32, u32); 3] = [(128, 2278), (256, 1148), (512, 576)];
    let start = Instant::now();
    let mut last = u32::MAX;
    for (b, frozen) in FROZEN {
        let lib = min_probes(PortSpace::default(), b, 0.99).map_err(|e| e.to_string())?;
        let oracle = product_threshold(K, b, 0.99);
        ensure(lib == oracle && lib == frozen, || {
            format!("B={b}: library {lib}, oracle {oracle}, frozen {frozen}")
        })?;
        ensure(lib < last, || format!("B={b}: {lib} not below {last}"))?;
        last = lib;
    }
    within_time(start, Duration::from_secs(1))?;
    Ok("A99 = 2278 > 1148 > 576".into())
}

fn monte_carlo() -> Check {
    let start = Instant::now();
    let mut notes = Vec::new();
    // (B, seconds at 100/s, seed, absolute tolerance or None for 3 sigma)
    let cases = [(256, 10, 1001, Some(0.004)), (128, 10, 1002, None), (512, 5, 1003, None)];
    for (b, secs, seed, tol) in cases {
        let cfg = BirthdayTrialConfig {
            punch: PunchConfig {
                open_ports: b,
                rate: 100,
                max_duration: Duration::from_secs(secs),
                seed,
                ..PunchConfig::default()
            },
            loss: 0.0,
            ..BirthdayTrialConfig::default()
        };
        let s = run_birthday_experiment(&cfg, 10_000, seed).map_err(|e| e.to_string())?;
        let oracle = product_oracle(K, b, secs as u32 * 100);
        ensure((s.analytic_rate - oracle).abs() < 1e-9, || format!("B={b}: analytic {} vs {oracle}", s.analytic_rate))?;
        let bound = tol.unwrap_or(3.0 * s.sigma);
        let dev = s.empirical_rate - oracle;
        ensure(dev.abs() <= bound, || {
            format!("B={b}: empirical {:.5} vs {oracle:.7}, |d|={:.5} > {bound:.5}", s.empirical_rate, dev.abs())
        })?;
        ensure(s.symmetric_failures == 0, || format!("B={b}: {} one-sided successes", s.symmetric_failures))?;
        notes.push(format!("B={b} {:.4}/{oracle:.4}", s.empirical_rate));
    }
    let t = start.elapsed();
    let mut line = notes.join(", ");
    if t > Duration::from_secs(120) {
        line.push_str(&format!(" (over the 2 min target: {t:.0?})"));
    }
    Ok(line)
}

fn binomial(n: u32, k: u32) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1))
}

fn exact_small() -> Check {
    let mut cases = 0u64;
    for k in 1..=12u32 {
        let space = PortSpace::with_size(k).map_err(|e| e.to_string())?;
        for b in 0..=k {
            let open = (1u32 << b) - 1;
            let mut hits = vec![0u128; k as usize + 1];
            let mut sets = vec![0u128; k as usize + 1];
            for probes in 0u32..(1 << k) {
                let a = probes.count_ones() as usize;
                sets[a] += 1;
                if probes & open != 0 {
                    hits[a] += 1;
                }
            }
            for a in 0..=(k - b) {
                // hits / sets == 1 - prod (k-b-i)/(k-i), cross-multiplied.
                let num: u128 = (0..a).map(|i| u128::from(k - b - i)).product();
                let den: u128 = (0..a).map(|i| u128::from(k - i)).product();
                ensure(hits[a as usize] * den == sets[a as usize] * (den - num), || {
                    format!("K={k} B={b} A={a}: {}/{} by enumeration", hits[a as usize], sets[a as usize])
                })?;
                let lib = success_probability(space, b, a).map_err(|e| e.to_string())?.value();
                let exact = hits[a as usize] as f64 / sets[a as usize] as f64;
                ensure((lib - exact).abs() <= 1e-12, || format!("K={k} B={b} A={a}: library {lib} vs {exact}"))?;
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=60u32);
        let b = rng.gen_range(0..=k);
        let a = rng.gen_range(0..=k - b);
        let closed = 1.0 - binomial(k - b, a) as f64 / binomial(k, a) as f64;
        let lib = success_probability(PortSpace::with_size(k).map_err(|e| e.to_string())?, b, a)
            .map_err(|e| e.to_string())?
            .value();
        worst = worst.max((closed - lib).abs());
        ensure((closed - lib).abs() <= 1e-12, || format!("K={k} B={b} A={a}: closed {closed} vs {lib}"))?;
    }
    Ok(format!("{cases} enumerated cases exact, closed form max error {worst:.1e}"))
}

fn scenario_json(scheme: (u8, u8, u8), n: usize, seed: u64) -> Value {
    let hosts: Vec<Value> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                json!({ "id": format!("n{i}"), "nat": format!("nat{i}") })
            } else {
                json!({ "id": format!("n{i}") })
            }
        })
        .collect();
    let nats: Vec<Value> = (0..n)
        .step_by(2)
        .map(|i| json!({ "id": format!("nat{i}"), "public_ip": format!("203.0.113.{}", 10 + i) }))
        .collect();
    json!({
        "hosts": hosts,
        "nats": nats,
        "links": [],
        "scheme": { "G": scheme.0, "P": scheme.1, "theta": scheme.2 },
        "subnets": [],
        "experiment": { "seed": seed }
    })
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).expect("write scenario");
    p
}

fn schemes(dir: &Path) -> Check {
    let named = [
        ((1, 0, 1), "Point-2-Site"),
        ((1, 0, 0), "Site-2-Site"),
        ((1, 1, 1), "Site Mesh"),
        ((0, 1, 1), "Full Mesh"),
    ];
    for ((g, p, t), name) in named {
        let kind = classify_scheme(SchemeParams { g, p, theta: t }).map_err(|e| e.to_string())?;
        ensure(kind.name() == name, || format!("({g},{p},{t}) -> {}", kind.name()))?;
    }
    for (g, p, t) in [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 1, 0)] {
        let file = write(dir, &format!("bad{g}{p}{t}.json"), &scenario_json((g, p, t), 3, 1).to_string());
        let out = run(bin().arg("scenario").arg(&file));
        ensure(out.status.code() == Some(4), || format!("({g},{p},{t}) exited {:?}", out.status.code()))?;
    }
    for n in 2..=8usize {
        let sc = ScenarioFile::from_json(&scenario_json((0, 1, 1), n, n as u64).to_string()).map_err(|e| e.to_string())?;
        let r = sc.run().map_err(|e| e.to_string())?.realization;
        ensure(r.scheme == SchemeKind::FullMesh, || format!("N={n}: scheme {:?}", r.scheme))?;
        let up = r.links.iter().filter(|l| l.is_alive()).count();
        ensure(r.links.len() == n * (n - 1) / 2 && up == r.links.len(), || {
            format!("N={n}: {up} of {} links up", r.links.len())
        })?;
        ensure(r.links.iter().all(|l| l.encrypted && l.handshake_ok), || format!("N={n}: unencrypted link"))?;
        ensure(r.leaks.is_empty() && r.links.iter().all(|l| !l.marker_visible), || {
            format!("N={n}: plaintext marker seen on {:?}", r.leaks)
        })?;
    }
    Ok("4 schemes named, 4 triples exit 4, full mesh N=2..8 complete and sealed".into())
}

fn fallback() -> Check {
    let r = ScenarioFile::from_json(bundled::BLOCKED)
        .and_then(|s| s.run())
        .map_err(|e| e.to_string())?
        .realization;
    ensure(r.connected, || format!("not connected, dead links {:?}", r.dead_links))?;
    let pair = r.link("harbor", "hollow").ok_or("no harbor-hollow link")?;
    ensure(pair.path == LinkOutcome::Relayed, || format!("hard pair went {:?}", pair.path))?;
    let walled: Vec<_> = r.links.iter().filter(|l| l.a == "walled" || l.b == "walled").collect();
    ensure(!walled.is_empty() && walled.iter().all(|l| l.path == LinkOutcome::Relayed), || {
        "blocked node not relayed".into()
    })?;
    let relayed: Vec<_> = r.links.iter().filter(|l| l.path == LinkOutcome::Relayed).collect();
    ensure(relayed.iter().all(|l| l.bulk_ok == Some(true)), || "bulk hash mismatch on a relayed link".into())?;
    Ok(format!("{} relayed links, bulk hashes match", relayed.len()))
}

fn determinism(dir: &Path) -> Check {
    for (name, text) in bundled::ALL {
        let file = write(dir, name, text);
        let a = run(bin().arg("scenario").arg(&file));
        let b = run(bin().arg("scenario").arg(&file));
        ensure(a.status.success() && b.status.success(), || format!("{name}: exit {:?}", a.status.code()))?;
        ensure(a.stdout == b.stdout, || format!("{name}: reports differ"))?;
        let v: Value = serde_json::from_slice(&a.stdout).map_err(|e| e.to_string())?;
        ensure(v["trace_digest"].as_str().is_some_and(|d| d.len() == 64), || format!("{name}: no trace digest"))?;
    }
    let sim = |jobs: &str| {
        run(bin().args(["simulate", "traversal", "--trials", "300", "--seed", "9", "--jobs", jobs])).stdout
    };
    let one = sim("1");
    ensure(!one.is_empty() && one == sim("4"), || "Monte Carlo output depends on --jobs".into())?;
    Ok("bundled reports byte-identical, --jobs 1 == --jobs 4".into())
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("probability table", Box::new(table)),
        ("short-budget claims", Box::new(short_budget)),
        ("0.99 thresholds", Box::new(thresholds)),
        ("formula vs simulator", Box::new(monte_carlo)),
        ("small-instance exact oracle", Box::new(exact_small)),
        ("scheme table and full mesh", Box::new(|| schemes(dir.path()))),
        ("fallback ladder", Box::new(fallback)),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let t = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({t:.2}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({t:.2}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
