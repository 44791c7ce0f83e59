//! TCP transport: the broker service and the device-side exchange.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anyhow::{Context, Result};
use awarenet_core::broker::Broker;
use awarenet_core::model::{Clock, SystemClock};
use awarenet_core::sync::LinkError;
use awarenet_core::wire::{self, Exchange, Request, Response, HEADER_LEN};

struct Shared {
    broker: Broker,
    snapshot: Option<PathBuf>,
}

pub fn serve(listen: &str, snapshot: Option<PathBuf>) -> Result<()> {
    let broker = match &snapshot {
        Some(p) if p.exists() => Broker::load(p).with_context(|| format!("loading {}", p.display()))?,
        _ => Broker::new(),
    };
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("listening {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let shared = Arc::new(Mutex::new(Shared { broker, snapshot }));
    for stream in listener.incoming() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept: {e}");
                continue;
            }
        };
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            if let Err(e) = connection(stream, &shared) {
                eprintln!("connection: {e:#}");
            }
        });
    }
    Ok(())
}

fn connection(stream: TcpStream, shared: &Mutex<Shared>) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let response = match wire::read_frame::<Request>(&mut reader) {
            Ok(None) => return Ok(()),
            Ok(Some(req)) => {
                let mutating = !matches!(req, Request::Deliver { .. });
                let mut s = shared.lock().expect("broker lock poisoned");
                let resp = wire::handle(&mut s.broker, req, SystemClock.now());
                if mutating {
                    if let Some(path) = &s.snapshot {
                        s.broker.save(path)?;
                    }
                }
                resp
            }
            Err(e @ (wire::WireError::Io(_) | wire::WireError::Truncated)) => return Err(e.into()),
            Err(e) => {
                let resp = Response::Error { code: wire::ErrorCode::Malformed, message: e.to_string() };
                wire::write_frame(&mut writer, &resp)?;
                return Ok(());
            }
        };
        wire::write_frame(&mut writer, &response)?;
    }
}

/// One connection to a broker service. Any transport failure reads as a
/// down link.
pub struct TcpExchange {
    stream: TcpStream,
}

impl TcpExchange {
    pub fn connect(addr: &str) -> Result<Self, LinkError> {
        let addrs: Vec<_> = addr.to_socket_addrs().map_err(|_| LinkError::Down)?.collect();
        let stream = addrs
            .iter()
            .find_map(|a| TcpStream::connect_timeout(a, Duration::from_secs(2)).ok())
            .ok_or(LinkError::Down)?;
        stream.set_read_timeout(Some(Duration::from_secs(10))).map_err(|_| LinkError::Down)?;
        Ok(Self { stream })
    }
}

impl Exchange for TcpExchange {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError> {
        self.stream.write_all(request).map_err(|_| LinkError::Down)?;
        let mut frame = vec![0u8; HEADER_LEN];
        self.stream.read_exact(&mut frame).map_err(|_| LinkError::Down)?;
        let len = u32::from_be_bytes([frame[3], frame[4], frame[5], frame[6]]);
        if len > wire::MAX_PAYLOAD {
            return Err(LinkError::Rejected(format!("oversized reply of {len} bytes")));
        }
        let mut payload = vec![0u8; len as usize];
        self.stream.read_exact(&mut payload).map_err(|_| LinkError::Down)?;
        frame.extend_from_slice(&payload);
        Ok(frame)
    }
}
