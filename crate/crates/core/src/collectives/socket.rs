use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::transport::{Frame, Transport, TransportError};

/// TCP full mesh. Rank `r` listens on its own address; every rank dials all
/// lower ranks and identifies itself with a 4-byte little-endian rank header,
/// then accepts connections from the higher ranks.
pub struct SocketTransport {
    rank: usize,
    world: usize,
    writers: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
    inbox: Vec<Option<Receiver<Frame>>>,
    streams: Vec<TcpStream>,
}

impl SocketTransport {
    /// Rank `r` listens on `host:(base_port + r)`.
    pub fn connect(
        rank: usize,
        world: usize,
        host: &str,
        base_port: u16,
        timeout: Duration,
    ) -> io::Result<Self> {
        let port_of = |r: usize| {
            u16::try_from(base_port as usize + r)
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "port out of range"))
        };
        let listener = TcpListener::bind((host, port_of(rank)?))?;
        let mut peers = Vec::with_capacity(world);
        for r in 0..world {
            let addr = (host, port_of(r)?)
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "cannot resolve host"))?;
            peers.push(addr);
        }
        Self::with_listener(rank, listener, &peers, timeout)
    }

    /// Establish the mesh given this rank's bound listener and every rank's address.
    pub fn with_listener(
        rank: usize,
        listener: TcpListener,
        peers: &[SocketAddr],
        timeout: Duration,
    ) -> io::Result<Self> {
        let world = peers.len();
        if rank >= world {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("rank {rank} outside world of {world}"),
            ));
        }
        let deadline = Instant::now() + timeout;
        let mut conns: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        for (peer, addr) in peers.iter().enumerate().take(rank) {
            let mut stream = dial(addr, deadline)?;
            stream.write_all(&(rank as u32).to_le_bytes())?;
            conns[peer] = Some(stream);
        }

        listener.set_nonblocking(true)?;
        let mut pending = world - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(remaining(deadline)?))?;
                    let mut header = [0u8; 4];
                    stream.read_exact(&mut header)?;
                    stream.set_read_timeout(None)?;
                    let peer = u32::from_le_bytes(header) as usize;
                    if peer <= rank || peer >= world || conns[peer].is_some() {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("unexpected rank header {peer} at rank {rank}"),
                        ));
                    }
                    conns[peer] = Some(stream);
                    pending -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    remaining(deadline)?;
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e),
            }
        }

        let mut writers = Vec::with_capacity(world);
        let mut inbox = Vec::with_capacity(world);
        let mut streams = Vec::new();
        for (peer, conn) in conns.into_iter().enumerate() {
            let Some(stream) = conn else {
                writers.push(None);
                inbox.push(None);
                continue;
            };
            stream.set_nodelay(true)?;
            let (tx, rx) = channel();
            let mut reader = BufReader::new(stream.try_clone()?);
            thread::Builder::new()
                .name(format!("rank{rank}-from{peer}"))
                .spawn(move || {
                    while let Ok(frame) = Frame::read_from(&mut reader) {
                        if frame.source as usize != peer || tx.send(frame).is_err() {
                            break;
                        }
                    }
                })?;
            streams.push(stream.try_clone()?);
            writers.push(Some(Mutex::new(BufWriter::new(stream))));
            inbox.push(Some(rx));
        }

        Ok(SocketTransport {
            rank,
            world,
            writers,
            inbox,
            streams,
        })
    }
}

fn remaining(deadline: Instant) -> io::Result<Duration> {
    deadline
        .checked_duration_since(Instant::now())
        .filter(|d| !d.is_zero())
        .ok_or_else(|| io::Error::new(io::ErrorKind::TimedOut, "socket rendezvous timed out"))
}

fn dial(addr: &SocketAddr, deadline: Instant) -> io::Result<TcpStream> {
    loop {
        match TcpStream::connect_timeout(addr, remaining(deadline)?) {
            Ok(s) => return Ok(s),
            Err(_) => {
                remaining(deadline)?;
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

impl Transport for SocketTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn send(&self, dst: usize, frame: Frame) -> Result<(), TransportError> {
        let writer = self.writers[dst]
            .as_ref()
            .ok_or(TransportError::Disconnected)?;
        let mut w = writer.lock().map_err(|_| TransportError::Disconnected)?;
        frame.write_to(&mut *w).map_err(TransportError::Io)
    }

    fn recv(&self, src: usize, timeout: Duration) -> Result<Frame, TransportError> {
        let rx = self.inbox[src].as_ref().ok_or(TransportError::Disconnected)?;
        rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Disconnected,
        })
    }

    fn kind(&self) -> &'static str {
        "socket"
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for w in self.writers.iter().flatten() {
            if let Ok(mut w) = w.lock() {
                let _ = w.flush();
            }
        }
        for s in &self.streams {
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}
