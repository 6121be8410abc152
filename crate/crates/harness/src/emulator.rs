//! UDP request-reply channel emulator.
//!
//! A datagram carries one block of symbols:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SEMC"
//! 4       1     version (1)
//! 5       1     flags (reserved, 0)
//! 6       4     sequence number, u32 LE
//! 10      4     symbol count n, u32 LE, n <= 4096
//! 14      8n    I, Q pairs as f32 LE
//! ```
//!
//! The reply has the same layout and sequence number. The emulator applies
//! the configured impairments, then the channel. The realisation for a
//! message depends only on the seed and its sequence number, so replies do
//! not depend on arrival order or on the transport.

use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use num_complex::Complex64;
use semlink::channel::impair;
use semlink::codec::SymbolBlock;
use semlink::frame::{from_le_bytes, to_le_bytes};
use semlink::{ChannelConfig, ChannelKind, ImpairmentConfig};
use semlink_tensor::rng::streams;
use semlink_tensor::RngStream;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SEMC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const MAX_SYMBOLS: usize = 4096;
pub const MAX_DATAGRAM: usize = HEADER_LEN + 8 * MAX_SYMBOLS;

/// How often the serve loop checks its stop flag.
const POLL: Duration = Duration::from_millis(50);

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub flags: u8,
    pub seq: u32,
    pub symbols: Vec<Complex64>,
}

impl Message {
    pub fn new(seq: u32, symbols: Vec<Complex64>) -> Self {
        Self { flags: 0, seq, symbols }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.symbols.len() > MAX_SYMBOLS {
            return Err(Error::Protocol(format!(
                "{} symbols exceed the {MAX_SYMBOLS}-symbol limit",
                self.symbols.len()
            )));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.symbols.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.flags);
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&(self.symbols.len() as u32).to_le_bytes());
        out.extend_from_slice(&to_le_bytes(&self.symbols));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol(format!(
                "datagram of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Protocol("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Protocol(format!("unsupported version {}", bytes[4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let seq = word(6);
        let n = word(10) as usize;
        if n > MAX_SYMBOLS {
            return Err(Error::Protocol(format!("symbol count {n} exceeds {MAX_SYMBOLS}")));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * n {
            return Err(Error::Protocol(format!(
                "header says {n} symbols, body has {} bytes",
                body.len()
            )));
        }
        Ok(Self {
            flags: bytes[5],
            seq,
            symbols: from_le_bytes(body)?,
        })
    }
}

/// Impairments plus channel, keyed by `(seed, seq)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Emulator {
    pub channel: ChannelConfig,
    pub impairments: Option<ImpairmentConfig>,
    pub seed: u64,
}

impl Emulator {
    /// `channel` must be AWGN or Rayleigh; transmitter impairments go in
    /// `impairments`.
    pub fn new(channel: ChannelConfig, impairments: Option<ImpairmentConfig>, seed: u64) -> Result<Self> {
        channel.validate()?;
        if channel.kind == ChannelKind::Impaired {
            return Err(Error::Config(
                "emulator channel must be awgn or rayleigh_slow; pass impairments separately".into(),
            ));
        }
        if let Some(imp) = &impairments {
            imp.validate()?;
        }
        Ok(Self {
            channel,
            impairments,
            seed,
        })
    }

    pub fn process(&self, msg: &Message) -> Result<Message> {
        let block = SymbolBlock::from_complex(&msg.symbols, (0, 0));
        let tx = match &self.impairments {
            Some(imp) => impair(&block, imp)?.symbols,
            None => block,
        };
        let mut rng = RngStream::new(self.seed, streams::LINK).child(msg.seq as u64).rng();
        let out = self.channel.apply(&tx, &mut rng)?;
        Ok(Message {
            flags: msg.flags,
            seq: msg.seq,
            symbols: out.symbols.to_complex(),
        })
    }

    /// One datagram in, one datagram out. The in-process transport and the
    /// UDP server share this path.
    pub fn handle_datagram(&self, bytes: &[u8]) -> Result<Vec<u8>> {
        self.process(&Message::decode(bytes)?)?.encode()
    }
}

#[derive(Debug, Default)]
pub struct EmulatorStats {
    pub received: AtomicU64,
    pub replied: AtomicU64,
    /// Malformed datagrams and failed sends.
    pub dropped: AtomicU64,
}

/// Serves until `stop` is set. Bad datagrams are counted and dropped.
pub fn serve(socket: &UdpSocket, emu: &Emulator, stats: &EmulatorStats, stop: &AtomicBool) -> Result<()> {
    socket.set_read_timeout(Some(POLL))?;
    let mut buf = vec![0u8; MAX_DATAGRAM + 1];
    while !stop.load(Ordering::Relaxed) {
        let (len, peer) = match socket.recv_from(&mut buf) {
            Ok(v) => v,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e.into()),
        };
        stats.received.fetch_add(1, Ordering::Relaxed);
        match emu.handle_datagram(&buf[..len]) {
            Ok(reply) if socket.send_to(&reply, peer).is_ok() => {
                stats.replied.fetch_add(1, Ordering::Relaxed);
            }
            Ok(_) => {
                stats.dropped.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => {
                log::warn!("dropping datagram from {peer}: {e}");
                stats.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
    Ok(())
}

/// Binds `addr` and serves forever.
pub fn emulator_serve(addr: impl ToSocketAddrs, emu: Emulator) -> Result<()> {
    let socket = UdpSocket::bind(addr)?;
    log::info!("emulator listening on {}", socket.local_addr()?);
    serve(&socket, &emu, &EmulatorStats::default(), &AtomicBool::new(false))
}

/// Emulator running on a background thread; stopped on drop.
pub struct EmulatorHandle {
    pub addr: SocketAddr,
    pub stats: Arc<EmulatorStats>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<()>>>,
}

impl EmulatorHandle {
    pub fn spawn(addr: impl ToSocketAddrs, emu: Emulator) -> Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        let addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(EmulatorStats::default());
        let thread = {
            let (stop, stats) = (stop.clone(), stats.clone());
            std::thread::spawn(move || serve(&socket, &emu, &stats, &stop))
        };
        Ok(Self {
            addr,
            stats,
            stop,
            thread: Some(thread),
        })
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<()> {
        self.stop.store(true, Ordering::Relaxed);
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| Error::Protocol("emulator thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for EmulatorHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Blocking request-reply client. No retransmission: a lost datagram is a
/// timeout error.
pub struct EmulatorClient {
    socket: UdpSocket,
}

impl EmulatorClient {
    pub fn connect(server: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let socket = UdpSocket::bind("127.0.0.1:0")?;
        socket.connect(server)?;
        socket.set_read_timeout(Some(timeout))?;
        Ok(Self { socket })
    }

    pub fn transmit(&self, seq: u32, symbols: &[Complex64]) -> Result<Vec<Complex64>> {
        self.socket.send(&Message::new(seq, symbols.to_vec()).encode()?)?;
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        loop {
            let len = self.socket.recv(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
                    Error::Protocol(format!("no reply for sequence {seq}"))
                }
                _ => e.into(),
            })?;
            let reply = Message::decode(&buf[..len])?;
            // A late reply to an earlier request is skipped.
            if reply.seq == seq {
                return Ok(reply.symbols);
            }
        }
    }
}

/// Where link-level symbols go: straight into an [`Emulator`] or over UDP.
/// Both routes serialise to the wire format, so they give identical output.
pub enum Transport {
    InProcess(Emulator),
    Udp(EmulatorClient),
}

impl Transport {
    pub fn transmit(&self, seq: u32, symbols: &[Complex64]) -> Result<Vec<Complex64>> {
        match self {
            Transport::InProcess(emu) => {
                let reply = emu.handle_datagram(&Message::new(seq, symbols.to_vec()).encode()?)?;
                Ok(Message::decode(&reply)?.symbols)
            }
            Transport::Udp(client) => client.transmit(seq, symbols),
        }
    }
}
