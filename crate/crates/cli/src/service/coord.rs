use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use bdmesh::rendezvous::{ConnId, Coordinator, CoordinatorConfig, Outbound, PunchParams, MAX_LINE};
use log::{debug, info, warn};

use super::{ServiceError, POLL};

#[derive(Debug, Clone)]
pub struct CoordOptions {
    /// TCP control port and first UDP observer.
    pub listen: SocketAddrV4,
    /// Second UDP observer used for NAT classification.
    pub listen2: SocketAddrV4,
    pub punch: PunchParams,
    pub seed: u64,
}

struct Shared {
    coord: Mutex<Coordinator>,
    writers: Mutex<HashMap<ConnId, TcpStream>>,
    udp: [UdpSocket; 2],
    started: Instant,
}

impl Shared {
    fn dispatch(&self, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::Control { conn, msg } => {
                    let mut writers = self.writers.lock().expect("writers lock");
                    if let Some(w) = writers.get_mut(&conn) {
                        if w.write_all(msg.to_line().as_bytes()).is_err() {
                            writers.remove(&conn);
                        }
                    }
                }
                Outbound::Datagram { listener, dst, msg } => {
                    if let Err(e) = self.udp[listener].send_to(msg.to_line().as_bytes(), dst) {
                        debug!("udp reply to {dst} failed: {e}");
                    }
                }
            }
        }
    }
}

fn bind_err(addr: SocketAddrV4) -> impl FnOnce(std::io::Error) -> ServiceError {
    move |source| ServiceError::Bind {
        addr: addr.to_string(),
        source,
    }
}

/// Serve until `shutdown` is set. Binding happens before this returns an
/// error-free startup, so callers can tell bind failures apart.
pub fn run_coordinator(opts: CoordOptions, shutdown: Arc<AtomicBool>) -> Result<(), ServiceError> {
    let tcp = TcpListener::bind(opts.listen).map_err(bind_err(opts.listen))?;
    let udp0 = UdpSocket::bind(opts.listen).map_err(bind_err(opts.listen))?;
    let udp1 = UdpSocket::bind(opts.listen2).map_err(bind_err(opts.listen2))?;
    tcp.set_nonblocking(true)?;
    for u in [&udp0, &udp1] {
        u.set_read_timeout(Some(POLL))?;
    }
    info!("coordinator on tcp {} and udp {} / {}", opts.listen, opts.listen, opts.listen2);
    eprintln!("listening control={} observe={} observe2={}", opts.listen, opts.listen, opts.listen2);
    let shared = Arc::new(Shared {
        coord: Mutex::new(Coordinator::new(CoordinatorConfig {
            punch: opts.punch,
            seed: opts.seed,
            ..CoordinatorConfig::default()
        })),
        writers: Mutex::new(HashMap::new()),
        udp: [udp0, udp1],
        started: Instant::now(),
    });

    let mut workers = Vec::new();
    for listener in 0..2 {
        let (shared, shutdown) = (shared.clone(), shutdown.clone());
        workers.push(thread::spawn(move || udp_loop(&shared, listener, &shutdown)));
    }
    let next_conn = AtomicU64::new(1);
    while !shutdown.load(Ordering::Relaxed) {
        match tcp.accept() {
            Ok((stream, peer)) => {
                let conn = ConnId(next_conn.fetch_add(1, Ordering::Relaxed));
                let std::net::SocketAddr::V4(peer) = peer else {
                    warn!("ignoring non-IPv4 control connection from {peer}");
                    continue;
                };
                debug!("control connection {} from {peer}", conn.0);
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(POLL))?;
                shared.writers.lock().expect("writers lock").insert(conn, stream.try_clone()?);
                let (shared, shutdown) = (shared.clone(), shutdown.clone());
                workers.push(thread::spawn(move || control_loop(&shared, conn, peer, stream, &shutdown)));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => warn!("accept failed: {e}"),
        }
    }
    for w in workers {
        let _ = w.join();
    }
    info!("coordinator stopped");
    Ok(())
}

fn udp_loop(shared: &Shared, listener: usize, shutdown: &AtomicBool) {
    let mut buf = [0u8; 2048];
    while !shutdown.load(Ordering::Relaxed) {
        match shared.udp[listener].recv_from(&mut buf) {
            Ok((n, std::net::SocketAddr::V4(src))) => {
                let now = shared.started.elapsed();
                let out = shared
                    .coord
                    .lock()
                    .expect("coordinator lock")
                    .handle_datagram(now, listener, src, &buf[..n]);
                shared.dispatch(out);
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => debug!("udp listener {listener}: {e}"),
        }
    }
}

fn control_loop(shared: &Shared, conn: ConnId, peer: SocketAddrV4, stream: TcpStream, shutdown: &AtomicBool) {
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    while !shutdown.load(Ordering::Relaxed) {
        let limit = (MAX_LINE + 1 - line.len()) as u64;
        match reader.by_ref().take(limit).read_until(b'\n', &mut line) {
            Ok(0) => break,
            Ok(_) => {
                let complete = line.last() == Some(&b'\n');
                let too_long = !complete && line.len() > MAX_LINE;
                if !complete && !too_long {
                    continue;
                }
                let text = String::from_utf8_lossy(&line).into_owned();
                line.clear();
                let now = shared.started.elapsed();
                let out = shared
                    .coord
                    .lock()
                    .expect("coordinator lock")
                    .handle_line(now, conn, peer, text.trim_end());
                shared.dispatch(out);
                if too_long {
                    break;
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    debug!("control connection {} closed", conn.0);
    shared.coord.lock().expect("coordinator lock").disconnect(conn);
    shared.writers.lock().expect("writers lock").remove(&conn);
}
