//! Coordinator and nodes over real loopback UDP and TCP.

use std::io::{BufRead, BufReader};
use std::net::{TcpListener, UdpSocket};
use std::process::{Child, Command, Output, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

struct Coord {
    child: Child,
    control: String,
    observe2: String,
}

impl Drop for Coord {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bdmesh"))
}

/// A loopback port that is free for both TCP and UDP right now.
fn free_port() -> u16 {
    loop {
        let tcp = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = tcp.local_addr().unwrap().port();
        if UdpSocket::bind(("127.0.0.1", port)).is_ok() {
            return port;
        }
    }
}

fn start_coord() -> Coord {
    let (p1, p2) = (free_port(), free_port());
    let control = format!("127.0.0.1:{p1}");
    let observe2 = format!("127.0.0.1:{p2}");
    let mut child = bin()
        .args(["coord", "--listen", &control, "--listen2", &observe2, "--seed", "1"])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if line.starts_with("listening") {
                let _ = tx.send(());
            }
        }
    });
    rx.recv_timeout(Duration::from_secs(10)).expect("coordinator did not start");
    Coord {
        child,
        control,
        observe2,
    }
}

fn node(coord: &Coord, dir: &tempfile::TempDir, id: &str, extra: &[&str]) -> Command {
    let key = dir.path().join(format!("{id}.key"));
    let mut cmd = bin();
    cmd.args(["node", "--coord", &coord.control, "--coord2", &coord.observe2, "--id", id])
        .arg("--key")
        .arg(key)
        .args(extra);
    cmd
}

fn server(coord: &Coord, dir: &tempfile::TempDir, id: &str) -> Child {
    node(coord, dir, id, &["--serve-seconds", "30"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap()
}

fn wait_for_line(c: &mut Child, prefix: &str) {
    let out = c.stdout.take().unwrap();
    let (tx, rx) = mpsc::channel();
    let prefix = prefix.to_string();
    thread::spawn(move || {
        for line in BufReader::new(out).lines().map_while(Result::ok) {
            if line.starts_with(&prefix) {
                let _ = tx.send(());
            }
        }
    });
    rx.recv_timeout(Duration::from_secs(10)).expect("node did not register");
}

fn finish(mut c: Child) {
    let _ = c.kill();
    let _ = c.wait();
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn direct_echo() {
    let coord = start_coord();
    let dir = tempfile::tempdir().unwrap();
    let b = server(&coord, &dir, "beta");
    let o = node(&coord, &dir, "alpha", &["--peer", "beta", "--echo", "hello there", "--timeout", "20"])
        .output()
        .unwrap();
    finish(b);
    let out = text(&o);
    assert!(o.status.success(), "{out}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.contains("registered alpha observed="), "{out}");
    assert!(out.contains("link beta direct encrypted"), "{out}");
    assert!(out.contains("echo beta hello there"), "{out}");
}

#[test]
fn forced_relay_echo_with_json_summary() {
    let coord = start_coord();
    let dir = tempfile::tempdir().unwrap();
    let b = server(&coord, &dir, "beta");
    let o = node(&coord, &dir, "alpha", &["--peer", "beta", "--echo", "via relay", "--force-relay", "--json"])
        .output()
        .unwrap();
    finish(b);
    let out = text(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("link beta relayed encrypted"), "{out}");
    assert!(out.contains("echo beta via relay"), "{out}");
    let json = &out[out.find('{').unwrap()..];
    let summary: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(summary["node_id"], "alpha");
}

#[test]
fn restarted_node_reconnects_with_same_key() {
    let coord = start_coord();
    let dir = tempfile::tempdir().unwrap();
    let b = server(&coord, &dir, "beta");
    for _ in 0..2 {
        let o = node(&coord, &dir, "alpha", &["--peer", "beta", "--timeout", "20"]).output().unwrap();
        assert!(o.status.success(), "{}", text(&o));
    }
    finish(b);
    let key = std::fs::read_to_string(dir.path().join("alpha.key")).unwrap();
    assert_eq!(key.trim().len(), 44);
}

#[test]
fn identity_conflict_exits_7() {
    let coord = start_coord();
    let dir = tempfile::tempdir().unwrap();
    let other = tempfile::tempdir().unwrap();
    let mut first = server(&coord, &dir, "gamma");
    wait_for_line(&mut first, "registered gamma");
    let o = node(&coord, &other, "gamma", &["--serve-seconds", "2"]).output().unwrap();
    finish(first);
    assert_eq!(o.status.code(), Some(7), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unreachable_coordinator_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let o = bin()
        .args(["node", "--coord", &format!("127.0.0.1:{port}"), "--id", "lonely"])
        .arg("--key")
        .arg(dir.path().join("k"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(6));
}

#[test]
fn coordinator_port_in_use_exits_5() {
    let coord = start_coord();
    let o = bin()
        .args(["coord", "--listen", &coord.control, "--listen2", &coord.observe2])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(5));
}
