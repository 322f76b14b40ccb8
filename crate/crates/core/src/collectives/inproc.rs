use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::time::Duration;

use super::transport::{Frame, Transport, TransportError};

/// Default depth of each per-pair queue.
pub const DEFAULT_QUEUE_DEPTH: usize = 64;

/// Threads in one process, connected by bounded FIFO channels per ordered rank pair.
pub struct InProcTransport {
    rank: usize,
    senders: Vec<Option<SyncSender<Frame>>>,
    receivers: Vec<Option<Receiver<Frame>>>,
}

impl InProcTransport {
    /// Build all endpoints of a `world`-rank world; endpoint `i` belongs to rank `i`.
    pub fn world(world: usize, depth: usize) -> Vec<InProcTransport> {
        let mut senders: Vec<Vec<Option<SyncSender<Frame>>>> =
            (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Frame>>>> =
            (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
        for src in 0..world {
            for dst in 0..world {
                if src == dst {
                    continue;
                }
                let (tx, rx) = sync_channel(depth);
                senders[src][dst] = Some(tx);
                receivers[dst][src] = Some(rx);
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (senders, receivers))| InProcTransport {
                rank,
                senders,
                receivers,
            })
            .collect()
    }
}

impl Transport for InProcTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.senders.len()
    }

    fn send(&self, dst: usize, frame: Frame) -> Result<(), TransportError> {
        let tx = self.senders[dst].as_ref().ok_or(TransportError::Disconnected)?;
        tx.send(frame).map_err(|_| TransportError::Disconnected)
    }

    fn recv(&self, src: usize, timeout: Duration) -> Result<Frame, TransportError> {
        let rx = self.receivers[src]
            .as_ref()
            .ok_or(TransportError::Disconnected)?;
        rx.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Disconnected,
        })
    }

    fn kind(&self) -> &'static str {
        "inproc"
    }
}
