//! Rolling packet windows and per-window communication graphs.
//!
//! A window is a fixed-duration slice of the packet stream; its graph has IP
//! addresses as nodes and, per unordered IP pair, the time-ordered packet
//! list with a direction bit. Edge sequences are capped at the most recent
//! [`MAX_EDGE_PACKETS`] packets so flood traffic cannot blow up downstream
//! sequence models; the cap records how many packets it dropped.

use crate::packet::{Direction, ParsedPacket};
use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::sync::Arc;
use thiserror::Error;

pub const MAX_EDGE_PACKETS: usize = 256;

/// Canonical unordered IP pair: `small < large`.
pub type EdgeKey = (IpAddr, IpAddr);

pub fn canonical_pair(a: IpAddr, b: IpAddr) -> EdgeKey {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// All packets captured during one fixed-duration interval.
#[derive(Clone, Debug)]
pub struct PacketWindow {
    pub window_index: usize,
    pub start_time: f64,
    pub end_time: f64,
    pub packets: Vec<Arc<ParsedPacket>>,
}

/// Time-ordered packets of one edge, with per-packet direction.
#[derive(Clone, Debug, Default)]
pub struct EdgeSeq {
    pub packets: Vec<(Arc<ParsedPacket>, Direction)>,
    /// Packets dropped by the per-edge cap (oldest first).
    pub truncated: usize,
}

/// Communication graph of one window.
#[derive(Clone, Debug, Default)]
pub struct CommGraph {
    pub nodes: BTreeSet<IpAddr>,
    pub edges: BTreeMap<EdgeKey, EdgeSeq>,
    /// Packets whose src equals dst, dropped.
    pub self_pairs_dropped: usize,
}

/// Start/end of window `index` for a stream starting at `t0`.
pub fn window_span(t0: f64, window_len: f64, stride: f64, index: usize) -> (f64, f64) {
    let start = t0 + index as f64 * stride;
    (start, start + window_len)
}

/// Number of windows needed so that the last packet time is covered.
pub fn window_count(t0: f64, t_last: f64, stride: f64) -> usize {
    ((t_last - t0) / stride).floor() as usize + 1
}

/// Slice a time-sorted packet stream into rolling windows.
///
/// Windows tile `[first packet time, last packet time]`; a packet lands in
/// every window whose span covers its timestamp; empty windows are emitted.
pub fn roll_windows(
    packets: &[Arc<ParsedPacket>],
    window_len: f64,
    stride: f64,
) -> Vec<PacketWindow> {
    assert!(window_len > 0.0, "window_len must be positive");
    assert!(stride > 0.0 && stride <= window_len, "0 < stride <= window_len");
    debug_assert!(packets.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    if packets.is_empty() {
        return Vec::new();
    }
    let t0 = packets[0].timestamp;
    let t_last = packets[packets.len() - 1].timestamp;
    let count = window_count(t0, t_last, stride);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let (start, end) = window_span(t0, window_len, stride, index);
        let lo = packets.partition_point(|p| p.timestamp < start);
        let hi = packets.partition_point(|p| p.timestamp < end);
        out.push(PacketWindow {
            window_index: index,
            start_time: start,
            end_time: end,
            packets: packets[lo..hi].to_vec(),
        });
    }
    out
}

/// Group a window's packets into the per-pair communication graph.
pub fn build_graph(window: &PacketWindow) -> CommGraph {
    build_graph_capped(window, MAX_EDGE_PACKETS)
}

pub fn build_graph_capped(window: &PacketWindow, max_edge_packets: usize) -> CommGraph {
    assert!(max_edge_packets > 0);
    let mut graph = CommGraph::default();
    for pkt in &window.packets {
        if pkt.src_ip == pkt.dst_ip {
            graph.self_pairs_dropped += 1;
            continue;
        }
        let key = canonical_pair(pkt.src_ip, pkt.dst_ip);
        let direction =
            if pkt.src_ip == key.0 { Direction::Forward } else { Direction::Reverse };
        let edge = graph.edges.entry(key).or_default();
        if edge.packets.len() == max_edge_packets {
            // keep the most recent window of packets
            edge.packets.remove(0);
            edge.truncated += 1;
        }
        edge.packets.push((Arc::clone(pkt), direction));
    }
    graph.nodes = graph
        .edges
        .keys()
        .flat_map(|(a, b)| [*a, *b])
        .collect();
    graph
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("edge sequence of length {0} is too short to split (need >= 2)")]
pub struct TooShort(pub usize);

/// Where the observed prefix ends for a sequence of `len` items: ceil(len/2).
pub fn split_point(len: usize) -> usize {
    len.div_ceil(2)
}

/// Split a sequence into (observed, future) halves for self-supervision.
pub fn split_sequence<T: Clone>(seq: &[T]) -> Result<(Vec<T>, Vec<T>), TooShort> {
    if seq.len() < 2 {
        return Err(TooShort(seq.len()));
    }
    let k = split_point(seq.len());
    Ok((seq[..k].to_vec(), seq[k..].to_vec()))
}
