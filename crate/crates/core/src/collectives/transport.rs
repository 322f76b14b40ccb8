use std::fmt;
use std::io::{self, Read, Write};
use std::time::Duration;

/// One point-to-point message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub generation: u64,
    pub source: u32,
    pub tag: u32,
    pub payload: Vec<u8>,
}

/// Frame header on the socket wire: generation u64, source u32, tag u32, length u32, all LE.
pub const FRAME_HEADER_LEN: usize = 20;

impl Frame {
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        header[0..8].copy_from_slice(&self.generation.to_le_bytes());
        header[8..12].copy_from_slice(&self.source.to_le_bytes());
        header[12..16].copy_from_slice(&self.tag.to_le_bytes());
        header[16..20].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        w.write_all(&header)?;
        w.write_all(&self.payload)?;
        w.flush()
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Frame> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        r.read_exact(&mut header)?;
        let generation = u64::from_le_bytes(header[0..8].try_into().unwrap());
        let source = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let tag = u32::from_le_bytes(header[12..16].try_into().unwrap());
        let len = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Frame {
            generation,
            source,
            tag,
            payload,
        })
    }
}

#[derive(Debug)]
pub enum TransportError {
    Timeout,
    Disconnected,
    Io(io::Error),
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportError::Timeout => write!(f, "timed out"),
            TransportError::Disconnected => write!(f, "peer disconnected"),
            TransportError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

/// Point-to-point messaging between the ranks of a fixed-size world.
///
/// Messages between an ordered pair of ranks are delivered in FIFO order.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    fn send(&self, dst: usize, frame: Frame) -> Result<(), TransportError>;
    fn recv(&self, src: usize, timeout: Duration) -> Result<Frame, TransportError>;
    fn kind(&self) -> &'static str;
}
