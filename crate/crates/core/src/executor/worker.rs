//! Worker host: the process launched on each node of a block.
//!
//! Connects back to its pool's listener, announces itself with a heartbeat
//! carrying a [`WorkerHello`], then runs up to `slots` tasks at a time until
//! it receives a shutdown frame or the connection drops.

use std::io;
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;

use super::protocol::{decode_payload, encode_payload, Frame, FrameKind, WorkerHello};
use super::WireTask;
use crate::app::AppRegistry;
use crate::error::{Outcome, TaskError};

#[derive(clap::Args, Debug, Clone, PartialEq, Eq)]
pub struct WorkerHostArgs {
    /// Pool listener address, host:port.
    #[arg(long)]
    pub addr: String,
    #[arg(long, default_value_t = 0)]
    pub block_id: u64,
    #[arg(long, default_value_t = 0)]
    pub host_index: u32,
    /// Concurrent task slots on this host.
    #[arg(long, default_value_t = 1)]
    pub slots: u32,
    #[arg(long, default_value_t = 5000)]
    pub heartbeat_ms: u64,
}

const CONNECT_PATIENCE: Duration = Duration::from_secs(10);

fn connect(addr: &str) -> io::Result<TcpStream> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() > CONNECT_PATIENCE => return Err(e),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

fn send(writer: &Mutex<TcpStream>, frame: &Frame) -> io::Result<()> {
    frame.write_to(&mut *writer.lock().unwrap())
}

pub fn run_worker_host(args: &WorkerHostArgs, registry: AppRegistry) -> io::Result<()> {
    let stream = connect(&args.addr)?;
    stream.set_nodelay(true)?;
    let mut reader = stream.try_clone()?;
    let writer = Arc::new(Mutex::new(stream));

    let hello = WorkerHello {
        block_id: args.block_id,
        host_index: args.host_index,
        slots: args.slots.max(1),
        pid: std::process::id(),
    };
    let payload = encode_payload(&hello).map_err(io::Error::other)?;
    send(&writer, &Frame::new(FrameKind::Heartbeat, 0, payload))?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let writer = writer.clone();
        let stop = stop.clone();
        let period = Duration::from_millis(args.heartbeat_ms.max(1));
        thread::Builder::new().name("heartbeat".into()).spawn(move || {
            let tick = period.min(Duration::from_millis(100));
            let mut last = Instant::now();
            while !stop.load(Ordering::Relaxed) {
                thread::sleep(tick);
                if last.elapsed() >= period {
                    if send(&writer, &Frame::heartbeat()).is_err() {
                        break;
                    }
                    last = Instant::now();
                }
            }
        })?;
    }

    let (tx, rx) = unbounded::<(u64, Vec<u8>)>();
    let registry = Arc::new(registry);
    let slots: Vec<_> = (0..hello.slots)
        .map(|i| {
            let rx = rx.clone();
            let writer = writer.clone();
            let registry = registry.clone();
            thread::Builder::new().name(format!("slot-{i}")).spawn(move || {
                for (id, payload) in rx {
                    let outcome: Outcome = match decode_payload::<WireTask>(&payload) {
                        Ok(task) => task.run(&registry),
                        Err(e) => Err(TaskError::app(format!("undecodable task: {e}"))),
                    };
                    let bytes = encode_payload(&outcome).unwrap_or_else(|e| {
                        let err: Outcome = Err(TaskError::app(format!("unencodable result: {e}")));
                        encode_payload(&err).expect("error outcome encodes")
                    });
                    if send(&writer, &Frame::new(FrameKind::Result, id, bytes)).is_err() {
                        break;
                    }
                }
            })
        })
        .collect::<Result<_, _>>()?;

    let graceful = loop {
        match Frame::read_from(&mut reader) {
            Ok(Some(frame)) => match frame.kind {
                FrameKind::Task => {
                    let _ = tx.send((frame.task_id, frame.payload));
                }
                FrameKind::Shutdown => break true,
                FrameKind::Heartbeat | FrameKind::Result => {}
            },
            Ok(None) | Err(_) => break false,
        }
    };
    drop(tx);
    if graceful {
        for s in slots {
            let _ = s.join();
        }
    }
    stop.store(true, Ordering::Relaxed);
    Ok(())
}
