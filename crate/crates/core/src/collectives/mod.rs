//! Majority-vote collectives over a pluggable point-to-point transport.
//!
//! Every rank of a world calls the same collective with equal-length input;
//! each call bumps the [`Topology`] generation, and every frame carries the
//! generation and a phase tag so that a desynchronized peer is caught instead
//! of silently mixing data from different calls.
//!
//! Four ways of producing the vote are provided:
//!
//! * [`ps_gather_broadcast`]: gather to rank 0, sum, broadcast (flat or binomial tree).
//! * [`direct_allreduce`]: ring reduce-scatter + allgather over offset-encoded,
//!   packed integer lanes.
//! * [`compressed_allreduce_1bit`]: 1-bit all-to-all, local vote, 1-bit allgather.
//! * [`allreduce_mean_f32`]: full-precision mean, used for momentum synchronization.

mod inproc;
mod socket;
mod transport;

pub use inproc::{InProcTransport, DEFAULT_QUEUE_DEPTH};
pub use socket::SocketTransport;
pub use transport::{Frame, Transport, TransportError, FRAME_HEADER_LEN};

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{pack, pack_signs, unpack, unpack_signs, PackedBits, SignPolicy, ZeroMode};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const TAG_GATHER: u32 = 1;
const TAG_BCAST: u32 = 2;
const TAG_REDUCE_SCATTER: u32 = 3;
const TAG_ALLGATHER: u32 = 4;
const TAG_ALL_TO_ALL: u32 = 5;
const TAG_BARRIER: u32 = 6;

/// A rank's view of the world: its transport endpoint plus the collective call counter.
pub struct Topology {
    transport: Box<dyn Transport>,
    generation: u64,
    timeout: Duration,
}

impl Topology {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Topology {
            transport,
            generation: 0,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn world_size(&self) -> usize {
        self.transport.world_size()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn transport_kind(&self) -> &'static str {
        self.transport.kind()
    }

    fn begin(&mut self) {
        self.generation += 1;
    }

    fn err(&self, phase: &'static str, peer: Option<usize>, reason: impl Into<String>) -> Error {
        Error::Collective {
            generation: self.generation,
            phase,
            rank: self.rank(),
            peer,
            reason: reason.into(),
        }
    }

    fn send(&self, dst: usize, tag: u32, phase: &'static str, payload: Vec<u8>) -> Result<()> {
        let frame = Frame {
            generation: self.generation,
            source: self.rank() as u32,
            tag,
            payload,
        };
        self.transport
            .send(dst, frame)
            .map_err(|e| self.err(phase, Some(dst), format!("send to rank {dst} failed: {e}")))
    }

    fn recv(&self, src: usize, tag: u32, phase: &'static str) -> Result<Vec<u8>> {
        let frame = self.transport.recv(src, self.timeout).map_err(|e| {
            self.err(phase, Some(src), format!("waiting for rank {src}: {e}"))
        })?;
        if frame.generation != self.generation || frame.tag != tag {
            return Err(self.err(
                phase,
                Some(src),
                format!(
                    "rank {src} sent generation {} tag {} but generation {} tag {tag} was expected",
                    frame.generation, frame.tag, self.generation
                ),
            ));
        }
        Ok(frame.payload)
    }

    /// Blocks until every rank has entered the barrier.
    pub fn barrier(&mut self) -> Result<()> {
        self.begin();
        let (p, r) = (self.world_size(), self.rank());
        if p == 1 {
            return Ok(());
        }
        if r == 0 {
            for src in 1..p {
                self.recv(src, TAG_BARRIER, "barrier")?;
            }
            for dst in 1..p {
                self.send(dst, TAG_BARRIER, "barrier", Vec::new())?;
            }
        } else {
            self.send(0, TAG_BARRIER, "barrier", Vec::new())?;
            self.recv(0, TAG_BARRIER, "barrier")?;
        }
        Ok(())
    }

    /// Ring allgather of one variable-size block per rank; returns blocks in rank order.
    pub fn allgather_bytes(&mut self, mine: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        self.begin();
        self.ring_allgather(mine)
    }

    fn ring_allgather(&self, mine: Vec<u8>) -> Result<Vec<Vec<u8>>> {
        let (p, r) = (self.world_size(), self.rank());
        let mut blocks: Vec<Option<Vec<u8>>> = vec![None; p];
        blocks[r] = Some(mine);
        let (next, prev) = ((r + 1) % p, (r + p - 1) % p);
        for step in 0..p.saturating_sub(1) {
            let send_idx = (r + p - step) % p;
            let recv_idx = (r + p - step - 1) % p;
            let out = blocks[send_idx].clone().expect("block present by ring order");
            self.send(next, TAG_ALLGATHER, "allgather", out)?;
            blocks[recv_idx] = Some(self.recv(prev, TAG_ALLGATHER, "allgather")?);
        }
        Ok(blocks.into_iter().map(|b| b.unwrap_or_default()).collect())
    }

    /// Ring reduce-scatter over `p` chunks. After return, `chunks[owned]` holds the
    /// full reduction of that chunk, where `owned` is the returned index.
    fn ring_reduce_scatter<T>(
        &self,
        chunks: &mut [Vec<T>],
        encode: impl Fn(&[T]) -> Result<Vec<u8>>,
        decode: impl Fn(&[u8], usize) -> Result<Vec<T>>,
        combine: impl Fn(&mut T, T),
    ) -> Result<usize> {
        let (p, r) = (self.world_size(), self.rank());
        let (next, prev) = ((r + 1) % p, (r + p - 1) % p);
        for step in 0..p - 1 {
            let send_idx = (r + p - step) % p;
            let recv_idx = (r + p - step - 1) % p;
            self.send(next, TAG_REDUCE_SCATTER, "reduce-scatter", encode(&chunks[send_idx])?)?;
            let bytes = self.recv(prev, TAG_REDUCE_SCATTER, "reduce-scatter")?;
            let incoming = decode(&bytes, chunks[recv_idx].len())
                .map_err(|e| self.err("reduce-scatter", Some(prev), e.to_string()))?;
            for (acc, v) in chunks[recv_idx].iter_mut().zip(incoming) {
                combine(acc, v);
            }
        }
        Ok((r + 1) % p)
    }
}

/// Spawn `world` threads connected by an in-process transport and run `f` on each rank.
/// Results come back in rank order.
pub fn run_local<T, F>(world: usize, timeout: Duration, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut Topology) -> T + Sync,
{
    let endpoints = InProcTransport::world(world, DEFAULT_QUEUE_DEPTH);
    thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|ep| {
                let f = &f;
                scope.spawn(move || {
                    let mut topo = Topology::new(Box::new(ep)).with_timeout(timeout);
                    f(&mut topo)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    })
}

/// Like [`run_local`] but over loopback TCP: each rank gets a listener on an
/// ephemeral port of 127.0.0.1 and the mesh is built with [`SocketTransport`].
pub fn run_local_socket<T, F>(world: usize, timeout: Duration, f: F) -> std::io::Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut Topology) -> T + Sync,
{
    let listeners = (0..world)
        .map(|_| std::net::TcpListener::bind(("127.0.0.1", 0)))
        .collect::<std::io::Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<std::io::Result<Vec<_>>>()?;
    thread::scope(|scope| {
        let handles: Vec<_> = listeners
            .into_iter()
            .enumerate()
            .map(|(rank, listener)| {
                let (f, addrs) = (&f, &addrs);
                scope.spawn(move || {
                    let ep = SocketTransport::with_listener(rank, listener, addrs, timeout)?;
                    let mut topo = Topology::new(Box::new(ep)).with_timeout(timeout);
                    Ok(f(&mut topo))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    })
}

/// Boundaries of chunk `k` when `n` elements are split into `p` nearly equal parts.
pub fn chunk_range(n: usize, p: usize, k: usize) -> std::ops::Range<usize> {
    (k * n / p)..((k + 1) * n / p)
}

/// Aggregated vote as seen by every rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub values: Vec<i32>,
    /// Inclusive bounds on `values`.
    pub range: (i32, i32),
    /// Elements whose signed aggregate was exactly zero.
    pub ties: usize,
}

impl VoteResult {
    fn from_sum(values: Vec<i32>, bound: i32) -> Self {
        let ties = values.iter().filter(|&&v| v == 0).count();
        VoteResult {
            values,
            range: (-bound, bound),
            ties,
        }
    }
}

/// Elementwise sign of the aggregate with zeros resolved by `policy`.
pub fn majority_sign(agg: &VoteResult, policy: SignPolicy) -> Vec<i8> {
    agg.values.iter().map(|&v| policy.sign(v)).collect()
}

fn encode_i32(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn decode_i32(bytes: &[u8], len: usize) -> Result<Vec<i32>> {
    if bytes.len() != len * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes of i32, got {}",
            len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn check_levels(values: &[i32], max_level: i32) -> Result<()> {
    if let Some((j, v)) = values.iter().enumerate().find(|(_, v)| v.abs() > max_level) {
        return Err(Error::config(format!(
            "value {v} at index {j} exceeds declared level bound {max_level}"
        )));
    }
    Ok(())
}

/// Parameter-server aggregation: gather every vector at rank 0, sum in rank
/// order, broadcast the sum. `efficient` selects binomial trees over flat sends.
/// `max_level` bounds `|c_j|` and fixes the declared result range.
pub fn ps_gather_broadcast(
    topo: &mut Topology,
    c: &[i32],
    max_level: i32,
    efficient: bool,
) -> Result<VoteResult> {
    check_levels(c, max_level)?;
    topo.begin();
    let (p, r, n) = (topo.world_size(), topo.rank(), c.len());
    let bound = max_level.saturating_mul(p as i32);

    let gathered: Option<Vec<Vec<i32>>> = if efficient {
        binomial_gather(topo, c)?
    } else if r == 0 {
        let mut all = vec![c.to_vec()];
        for src in 1..p {
            let bytes = topo.recv(src, TAG_GATHER, "gather")?;
            all.push(decode_i32(&bytes, n).map_err(|e| topo.err("gather", Some(src), e.to_string()))?);
        }
        Some(all)
    } else {
        topo.send(0, TAG_GATHER, "gather", encode_i32(c))?;
        None
    };

    let sum = gathered.map(|all| {
        let mut acc = vec![0i64; n];
        for v in &all {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x as i64;
            }
        }
        acc.into_iter().map(|s| s as i32).collect::<Vec<i32>>()
    });

    let sum = if efficient {
        binomial_broadcast(topo, sum, n)?
    } else if r == 0 {
        let sum = sum.expect("root holds the sum");
        let bytes = encode_i32(&sum);
        for dst in 1..p {
            topo.send(dst, TAG_BCAST, "broadcast", bytes.clone())?;
        }
        sum
    } else {
        let bytes = topo.recv(0, TAG_BCAST, "broadcast")?;
        decode_i32(&bytes, n).map_err(|e| topo.err("broadcast", Some(0), e.to_string()))?
    };
    Ok(VoteResult::from_sum(sum, bound))
}

/// Parent of `rank` in the binomial tree rooted at 0 (highest set bit cleared).
fn tree_parent(rank: usize) -> Option<usize> {
    (rank != 0).then(|| rank & !(1usize << (usize::BITS - 1 - rank.leading_zeros())))
}

/// Children of `rank`, smallest subtree first.
fn tree_children(rank: usize, p: usize) -> Vec<usize> {
    let start = if rank == 0 {
        1
    } else {
        1usize << (usize::BITS - rank.leading_zeros())
    };
    std::iter::successors(Some(start), |m| m.checked_mul(2))
        .take_while(|&m| rank + m < p)
        .map(|m| rank + m)
        .collect()
}

/// Subtree gather. Payload is a list of `(rank u32, i32 values...)` records.
fn binomial_gather(topo: &Topology, c: &[i32]) -> Result<Option<Vec<Vec<i32>>>> {
    let (p, r, n) = (topo.world_size(), topo.rank(), c.len());
    let mut rows: Vec<(usize, Vec<i32>)> = vec![(r, c.to_vec())];
    for child in tree_children(r, p) {
        let bytes = topo.recv(child, TAG_GATHER, "gather")?;
        let rec = 4 + 4 * n;
        if bytes.len() % rec != 0 {
            return Err(topo.err("gather", Some(child), "malformed subtree payload"));
        }
        for chunk in bytes.chunks_exact(rec) {
            let who = u32::from_le_bytes(chunk[0..4].try_into().unwrap()) as usize;
            rows.push((who, decode_i32(&chunk[4..], n)?));
        }
    }
    match tree_parent(r) {
        Some(parent) => {
            let mut out = Vec::with_capacity(rows.len() * (4 + 4 * n));
            for (who, v) in &rows {
                out.extend_from_slice(&(*who as u32).to_le_bytes());
                out.extend_from_slice(&encode_i32(v));
            }
            topo.send(parent, TAG_GATHER, "gather", out)?;
            Ok(None)
        }
        None => {
            rows.sort_by_key(|(who, _)| *who);
            if rows.len() != p || rows.iter().enumerate().any(|(i, (who, _))| i != *who) {
                return Err(topo.err("gather", None, "subtree gather lost or duplicated ranks"));
            }
            Ok(Some(rows.into_iter().map(|(_, v)| v).collect()))
        }
    }
}

fn binomial_broadcast(topo: &Topology, root_value: Option<Vec<i32>>, n: usize) -> Result<Vec<i32>> {
    let (p, r) = (topo.world_size(), topo.rank());
    let value = match tree_parent(r) {
        None => root_value.expect("root holds the sum"),
        Some(parent) => {
            let bytes = topo.recv(parent, TAG_BCAST, "broadcast")?;
            decode_i32(&bytes, n).map_err(|e| topo.err("broadcast", Some(parent), e.to_string()))?
        }
    };
    let bytes = encode_i32(&value);
    // largest subtree first so the deepest branch starts earliest
    for child in tree_children(r, p).into_iter().rev() {
        topo.send(child, TAG_BCAST, "broadcast", bytes.clone())?;
    }
    Ok(value)
}

/// How signed per-worker values are mapped onto non-negative lane codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneEncoding {
    /// `{-1, 1} → {0, 1}`; the signed aggregate is `2·Σcode − P`.
    SignBit,
    /// `v → v + L` for `|v| ≤ L`; the signed aggregate is `Σcode − P·L`.
    Offset(i32),
}

impl LaneEncoding {
    pub fn max_code(&self) -> u64 {
        match self {
            LaneEncoding::SignBit => 1,
            LaneEncoding::Offset(l) => 2 * *l as u64,
        }
    }

    fn max_level(&self) -> i32 {
        match self {
            LaneEncoding::SignBit => 1,
            LaneEncoding::Offset(l) => *l,
        }
    }

    fn encode(&self, j: usize, v: i32) -> Result<u32> {
        match *self {
            LaneEncoding::SignBit if v == 1 || v == -1 => Ok(((v + 1) / 2) as u32),
            LaneEncoding::Offset(l) if v.abs() <= l => Ok((v + l) as u32),
            _ => Err(Error::config(format!(
                "value {v} at index {j} is not representable under {self:?}"
            ))),
        }
    }

    fn decode_sum(&self, sum: u64, world: usize) -> i32 {
        match *self {
            LaneEncoding::SignBit => 2 * sum as i32 - world as i32,
            LaneEncoding::Offset(l) => sum as i32 - world as i32 * l,
        }
    }
}

/// Lane widths the direct allreduce can reduce in; sub-byte widths divide 8.
pub const LANE_WIDTHS: [u8; 6] = [1, 2, 4, 8, 16, 32];

/// Check that `world` summed codes fit in a `lane_bits`-bit lane.
pub fn check_lane_capacity(world: usize, encoding: LaneEncoding, lane_bits: u8) -> Result<()> {
    if !LANE_WIDTHS.contains(&lane_bits) {
        return Err(Error::config(format!("unsupported lane width {lane_bits}")));
    }
    let need = world as u64 * encoding.max_code();
    let cap = (1u64 << lane_bits) - 1;
    if need > cap {
        return Err(Error::config(format!(
            "sum of {world} codes up to {} reaches {need}, which exceeds the representable value range [0, {cap}] of the {lane_bits}-bit lane",
            encoding.max_code()
        )));
    }
    Ok(())
}

/// Smallest lane in [`LANE_WIDTHS`] whose capacity fits `world` summed codes.
pub fn smallest_lane(world: usize, encoding: LaneEncoding) -> Option<u8> {
    LANE_WIDTHS
        .into_iter()
        .find(|&w| check_lane_capacity(world, encoding, w).is_ok())
}

fn encode_lane(codes: &[u32], lane_bits: u8) -> Result<Vec<u8>> {
    match lane_bits {
        16 => Ok(codes.iter().flat_map(|&c| (c as u16).to_le_bytes()).collect()),
        32 => Ok(codes.iter().flat_map(|&c| c.to_le_bytes()).collect()),
        w => {
            let v: Vec<i32> = codes.iter().map(|&c| c as i32).collect();
            Ok(pack(&v, w, 0)?.to_bytes())
        }
    }
}

fn decode_lane(bytes: &[u8], lane_bits: u8, len: usize) -> Result<Vec<u32>> {
    let codes: Vec<u32> = match lane_bits {
        16 => {
            if bytes.len() != 2 * len {
                return Err(Error::Format(format!("expected {} lane bytes, got {}", 2 * len, bytes.len())));
            }
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()
        }
        32 => {
            if bytes.len() != 4 * len {
                return Err(Error::Format(format!("expected {} lane bytes, got {}", 4 * len, bytes.len())));
            }
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        w => {
            let packed = PackedBits::from_bytes(bytes)?;
            if packed.width != w || packed.count != len {
                return Err(Error::Format(format!(
                    "lane payload has width {} count {}, expected {w} and {len}",
                    packed.width, packed.count
                )));
            }
            unpack(&packed)?.into_iter().map(|c| c as u32).collect()
        }
    };
    Ok(codes)
}

/// Exact elementwise sum of `q` across ranks via ring reduce-scatter and
/// allgather over packed `lane_bits`-bit codes. The lane capacity is checked
/// before anything is sent.
pub fn direct_allreduce(
    topo: &mut Topology,
    q: &[i32],
    encoding: LaneEncoding,
    lane_bits: u8,
) -> Result<VoteResult> {
    let p = topo.world_size();
    check_lane_capacity(p, encoding, lane_bits)?;
    let codes = q
        .iter()
        .enumerate()
        .map(|(j, &v)| encoding.encode(j, v))
        .collect::<Result<Vec<u32>>>()?;
    topo.begin();

    let n = codes.len();
    let mut chunks: Vec<Vec<u32>> = (0..p).map(|k| codes[chunk_range(n, p, k)].to_vec()).collect();
    let total = if p == 1 {
        codes
    } else {
        let owned = topo.ring_reduce_scatter(
            &mut chunks,
            |c| encode_lane(c, lane_bits),
            |b, len| decode_lane(b, lane_bits, len),
            |acc, v| *acc += v,
        )?;
        let block = encode_lane(&chunks[owned], lane_bits)?;
        // rotate so block k of the ring allgather is chunk k
        let blocks = topo.ring_allgather_rotated(block, owned)?;
        let mut out = Vec::with_capacity(n);
        for (k, bytes) in blocks.iter().enumerate() {
            let len = chunk_range(n, p, k).len();
            out.extend(decode_lane(bytes, lane_bits, len).map_err(|e| topo.err("allgather", None, e.to_string()))?);
        }
        out
    };

    let values = total
        .into_iter()
        .map(|s| encoding.decode_sum(s as u64, p))
        .collect();
    Ok(VoteResult::from_sum(values, encoding.max_level() * p as i32))
}

impl Topology {
    /// Ring allgather where this rank contributes block index `my_block`
    /// (a rank rotation); returns blocks ordered by block index.
    fn ring_allgather_rotated(&self, mine: Vec<u8>, my_block: usize) -> Result<Vec<Vec<u8>>> {
        let p = self.world_size();
        let shift = (my_block + p - self.rank()) % p;
        let by_rank = self.ring_allgather(mine)?;
        let mut by_block = vec![Vec::new(); p];
        for (rank, b) in by_rank.into_iter().enumerate() {
            by_block[(rank + shift) % p] = b;
        }
        Ok(by_block)
    }
}

/// 1-bit majority vote: signs are split into `P` chunks and exchanged
/// pairwise (all-to-all), each rank votes on its chunk, and the 1-bit
/// results are allgathered. Zeros at both stages are resolved by `policy`,
/// which therefore must be alternating.
pub fn compressed_allreduce_1bit(
    topo: &mut Topology,
    c: &[f32],
    policy: SignPolicy,
) -> Result<VoteResult> {
    if policy.mode != ZeroMode::Alternating {
        return Err(Error::config(
            "the 1-bit compressed allreduce cannot carry zeros; use the alternating zero policy",
        ));
    }
    topo.begin();
    let (p, r, n) = (topo.world_size(), topo.rank(), c.len());
    let chunk = n.div_ceil(p);
    let padded = chunk * p;
    let mut signs: Vec<i8> = c.iter().map(|&v| policy.sign(v)).collect();
    signs.resize(padded, 1);

    let mut contributions: Vec<Vec<i8>> = vec![Vec::new(); p];
    contributions[r] = signs[r * chunk..(r + 1) * chunk].to_vec();
    for step in 1..p {
        let dst = (r + step) % p;
        let src = (r + p - step) % p;
        let out = pack_signs(&signs[dst * chunk..(dst + 1) * chunk])?.to_bytes();
        topo.send(dst, TAG_ALL_TO_ALL, "all-to-all", out)?;
        let bytes = topo.recv(src, TAG_ALL_TO_ALL, "all-to-all")?;
        let theirs = PackedBits::from_bytes(&bytes)
            .and_then(|pb| unpack_signs(&pb))
            .map_err(|e| topo.err("all-to-all", Some(src), e.to_string()))?;
        if theirs.len() != chunk {
            return Err(topo.err("all-to-all", Some(src), "chunk length mismatch"));
        }
        contributions[src] = theirs;
    }

    let mut ties = 0u32;
    let voted: Vec<i8> = (0..chunk)
        .map(|j| {
            let sum: i32 = contributions.iter().map(|v| v[j] as i32).sum();
            let global = r * chunk + j;
            if global >= n {
                return 1;
            }
            if sum == 0 {
                ties += 1;
            }
            policy.sign(sum)
        })
        .collect();

    let mut block = ties.to_le_bytes().to_vec();
    block.extend(pack_signs(&voted)?.to_bytes());
    let blocks = topo.ring_allgather(block)?;

    let mut values = Vec::with_capacity(padded);
    let mut total_ties = 0usize;
    for (src, b) in blocks.iter().enumerate() {
        if b.len() < 4 {
            return Err(topo.err("allgather", Some(src), "missing tie count"));
        }
        total_ties += u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize;
        let part = PackedBits::from_bytes(&b[4..])
            .and_then(|pb| unpack_signs(&pb))
            .map_err(|e| topo.err("allgather", Some(src), e.to_string()))?;
        values.extend(part.into_iter().map(i32::from));
    }
    values.truncate(n);
    Ok(VoteResult {
        values,
        range: (-1, 1),
        ties: total_ties,
    })
}

/// Elementwise mean across ranks. Partial sums travel the ring in f64 and the
/// final division happens once per element, so every rank returns identical bits.
pub fn allreduce_mean_f32(topo: &mut Topology, x: &[f32]) -> Result<Vec<f32>> {
    topo.begin();
    let (p, n) = (topo.world_size(), x.len());
    if p == 1 {
        return Ok(x.to_vec());
    }
    let mut chunks: Vec<Vec<f64>> = (0..p)
        .map(|k| x[chunk_range(n, p, k)].iter().map(|&v| v as f64).collect())
        .collect();
    let owned = topo.ring_reduce_scatter(
        &mut chunks,
        |c| Ok(c.iter().flat_map(|v| v.to_le_bytes()).collect()),
        |b, len| {
            if b.len() != 8 * len {
                return Err(Error::Format("f64 chunk length mismatch".to_string()));
            }
            Ok(b.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        },
        |acc, v| *acc += v,
    )?;
    let mean: Vec<u8> = chunks[owned]
        .iter()
        .flat_map(|&s| ((s / p as f64) as f32).to_le_bytes())
        .collect();
    let blocks = topo.ring_allgather_rotated(mean, owned)?;
    let mut out = Vec::with_capacity(n);
    for (k, b) in blocks.iter().enumerate() {
        if b.len() != 4 * chunk_range(n, p, k).len() {
            return Err(topo.err("allgather", None, "f32 chunk length mismatch"));
        }
        out.extend(
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    Ok(out)
}

/// Gather every rank's f32 vector at every rank (rank order).
pub fn allgather_f32(topo: &mut Topology, x: &[f32]) -> Result<Vec<Vec<f32>>> {
    let bytes = x.iter().flat_map(|v| v.to_le_bytes()).collect();
    let blocks = topo.allgather_bytes(bytes)?;
    blocks
        .into_iter()
        .enumerate()
        .map(|(src, b)| {
            if b.len() != 4 * x.len() {
                return Err(topo.err("allgather", Some(src), "f32 vector length mismatch"));
            }
            Ok(b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        })
        .collect()
}
