//! Sum-based hierarchical aggregation of latent packet vectors.
//!
//! Each edge sequence is encoded to per-packet z rows; the edge feature is
//! the sum of its unmasked rows, a node feature is the sum over incident
//! edges, and the global feature is the sum over all edges. Every edge is
//! incident to exactly two nodes, so the node features always sum to twice
//! the global feature.

use crate::graph::{CommGraph, EdgeKey, EdgeSeq};
use crate::packet::{PacketVector, Schema};
use crate::transformer::{EncodeError, EncodedSequence, ModelParams};
use std::collections::BTreeMap;
use std::net::IpAddr;

/// Aggregated features for one window at all three levels.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowFeatures {
    pub window_index: usize,
    pub global: Vec<f64>,
    pub nodes: BTreeMap<IpAddr, Vec<f64>>,
    pub edges: BTreeMap<EdgeKey, Vec<f64>>,
}

/// Encode an edge's packets into schema rows. Delta time is measured
/// between consecutive packets of the same edge; the first row gets 0.
pub fn edge_rows(seq: &EdgeSeq, schema: &Schema) -> Vec<PacketVector> {
    let mut prev: Option<f64> = None;
    seq.packets
        .iter()
        .map(|(pkt, dir)| {
            let row = schema.encode(pkt, prev.unwrap_or(pkt.timestamp), *dir);
            prev = Some(pkt.timestamp);
            row
        })
        .collect()
}

/// Sum of unmasked latent rows.
pub fn sum_unmasked(enc: &EncodedSequence) -> Vec<f64> {
    let d = enc.z.cols();
    let mut out = vec![0.0; d];
    for (r, &real) in enc.mask.iter().enumerate() {
        if real {
            for (c, acc) in out.iter_mut().enumerate() {
                *acc += enc.z.at(r, c);
            }
        }
    }
    out
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// Run the encoder over every edge of a window's graph and aggregate.
///
/// Edges longer than the model's max sequence length keep only their most
/// recent packets; delta times are recomputed within the kept slice.
pub fn featurize_window(
    graph: &CommGraph,
    window_index: usize,
    schema: &Schema,
    params: &ModelParams,
) -> Result<WindowFeatures, EncodeError> {
    let d = params.config.d_z;
    let mut edges: BTreeMap<EdgeKey, Vec<f64>> = BTreeMap::new();
    for (key, seq) in &graph.edges {
        let keep = params.config.max_seq_len.min(seq.packets.len());
        let trimmed = EdgeSeq {
            packets: seq.packets[seq.packets.len() - keep..].to_vec(),
            truncated: seq.truncated + (seq.packets.len() - keep),
        };
        let rows = edge_rows(&trimmed, schema);
        let enc = params.encode(&rows)?;
        edges.insert(*key, sum_unmasked(&enc));
    }
    let mut nodes: BTreeMap<IpAddr, Vec<f64>> =
        graph.nodes.iter().map(|ip| (*ip, vec![0.0; d])).collect();
    let mut global = vec![0.0; d];
    for (key, feat) in &edges {
        add_into(&mut global, feat);
        add_into(nodes.get_mut(&key.0).expect("edge endpoint in node set"), feat);
        add_into(nodes.get_mut(&key.1).expect("edge endpoint in node set"), feat);
    }
    Ok(WindowFeatures { window_index, global, nodes, edges })
}
