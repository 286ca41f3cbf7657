use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread::JoinHandle;

use super::message::RoundMessage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportMode {
    InProcess,
    /// TCP on 127.0.0.1; port 0 picks a free one.
    Loopback { port: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Peer {
    Server,
    Site(u32),
}

/// A captured wire frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRecord {
    pub from: Peer,
    pub to: Peer,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WireStats {
    pub messages: u64,
    pub bytes_to_server: u64,
    pub bytes_to_sites: u64,
}

impl WireStats {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_to_server + self.bytes_to_sites
    }
}

enum Channel {
    Queue(VecDeque<Vec<u8>>),
    Socket {
        writer: TcpStream,
        rx: mpsc::Receiver<io::Result<Vec<u8>>>,
        reader: Option<JoinHandle<()>>,
        pending: usize,
    },
}

/// Ordered, exactly-once delivery between the server and the sites. Every
/// frame is encoded with the private-path guard before it leaves the sender.
pub struct Transport {
    mode: TransportMode,
    private: BTreeSet<String>,
    listener: Option<TcpListener>,
    channels: BTreeMap<(Peer, Peer), Channel>,
    stats: WireStats,
    capture: Option<Vec<WireRecord>>,
}

impl Transport {
    pub fn new(mode: TransportMode, private: BTreeSet<String>) -> Result<Self> {
        let listener = match mode {
            TransportMode::InProcess => None,
            TransportMode::Loopback { port } => Some(TcpListener::bind(("127.0.0.1", port))?),
        };
        Ok(Self {
            mode,
            private,
            listener,
            channels: BTreeMap::new(),
            stats: WireStats::default(),
            capture: None,
        })
    }

    pub fn mode(&self) -> TransportMode {
        self.mode
    }

    /// Keeps a copy of every frame from now on.
    pub fn enable_capture(&mut self) {
        self.capture.get_or_insert_with(Vec::new);
    }

    pub fn captured(&self) -> &[WireRecord] {
        self.capture.as_deref().unwrap_or(&[])
    }

    pub fn take_captured(&mut self) -> Vec<WireRecord> {
        self.capture.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn stats(&self) -> WireStats {
        self.stats
    }

    fn open(&mut self, from: Peer, to: Peer) -> Result<&mut Channel> {
        if !self.channels.contains_key(&(from, to)) {
            let ch = match &self.listener {
                None => Channel::Queue(VecDeque::new()),
                Some(listener) => {
                    let writer = TcpStream::connect(listener.local_addr()?)?;
                    writer.set_nodelay(true)?;
                    let (mut stream, _) = listener.accept()?;
                    let (tx, rx) = mpsc::channel();
                    let reader = std::thread::spawn(move || loop {
                        let mut len = [0u8; 8];
                        match stream.read_exact(&mut len) {
                            Ok(()) => {}
                            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return,
                            Err(e) => {
                                let _ = tx.send(Err(e));
                                return;
                            }
                        }
                        let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
                        let res = stream.read_exact(&mut buf).map(|_| buf);
                        let failed = res.is_err();
                        if tx.send(res).is_err() || failed {
                            return;
                        }
                    });
                    Channel::Socket {
                        writer,
                        rx,
                        reader: Some(reader),
                        pending: 0,
                    }
                }
            };
            self.channels.insert((from, to), ch);
        }
        Ok(self.channels.get_mut(&(from, to)).expect("just inserted"))
    }

    pub fn send(&mut self, from: Peer, to: Peer, msg: &RoundMessage) -> Result<()> {
        let bytes = msg.encode(&self.private)?;
        let n = bytes.len() as u64;
        if let Some(cap) = &mut self.capture {
            cap.push(WireRecord {
                from,
                to,
                bytes: bytes.clone(),
            });
        }
        match self.open(from, to)? {
            Channel::Queue(q) => q.push_back(bytes),
            Channel::Socket { writer, pending, .. } => {
                writer.write_all(&n.to_le_bytes())?;
                writer.write_all(&bytes)?;
                *pending += 1;
            }
        }
        self.stats.messages += 1;
        match to {
            Peer::Server => self.stats.bytes_to_server += n,
            Peer::Site(_) => self.stats.bytes_to_sites += n,
        }
        Ok(())
    }

    /// Next message on the `from -> to` channel.
    pub fn recv(&mut self, from: Peer, to: Peer) -> Result<RoundMessage> {
        let bytes = match self.open(from, to)? {
            Channel::Queue(q) => q.pop_front(),
            Channel::Socket { rx, pending, .. } => {
                if *pending == 0 {
                    None
                } else {
                    *pending -= 1;
                    let frame = rx.recv().map_err(|_| Error::protocol("loopback reader stopped"))?;
                    Some(frame?)
                }
            }
        };
        let bytes = bytes.ok_or_else(|| Error::protocol(format!("no message pending from {from:?} to {to:?}")))?;
        RoundMessage::decode(&bytes)
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        for ch in self.channels.values_mut() {
            if let Channel::Socket { writer, reader, .. } = ch {
                let _ = writer.shutdown(std::net::Shutdown::Write);
                if let Some(h) = reader.take() {
                    let _ = h.join();
                }
            }
        }
    }
}
