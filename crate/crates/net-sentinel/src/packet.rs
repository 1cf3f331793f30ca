//! Packet representation and feature schemas.
//!
//! A [`ParsedPacket`] is the dissector's output; a [`Schema`] turns it into a
//! fixed-width numeric row with typed channels (binary / categorical one-hot
//! / numerical). Channel order is part of the cache format and must not
//! change between writes and reads.

use serde::{Deserialize, Serialize};
use std::net::IpAddr;
use thiserror::Error;

/// Protocol label of a frame; the most specific layer wins (TCP/UDP over IP).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Arp,
    Ip,
    Ipv6,
    Tcp,
    Udp,
}

impl Protocol {
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        match self {
            Protocol::Arp => 0,
            Protocol::Ip => 1,
            Protocol::Ipv6 => 2,
            Protocol::Tcp => 3,
            Protocol::Udp => 4,
        }
    }
}

/// Application service inferred from the well-known side of the port pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Service {
    Dnp3,
    Ftp,
    Http,
    Https,
    Git,
    Telnet,
    Ssh,
    X11,
    Dns,
    Ntp,
    Other,
}

impl Service {
    pub const COUNT: usize = 11;

    pub fn index(self) -> usize {
        match self {
            Service::Dnp3 => 0,
            Service::Ftp => 1,
            Service::Http => 2,
            Service::Https => 3,
            Service::Git => 4,
            Service::Telnet => 5,
            Service::Ssh => 6,
            Service::X11 => 7,
            Service::Dns => 8,
            Service::Ntp => 9,
            Service::Other => 10,
        }
    }
}

/// Classify a port pair by its lower (well-known) port.
pub fn infer_service(src_port: u16, dst_port: u16) -> Service {
    match src_port.min(dst_port) {
        20000 => Service::Dnp3,
        20 | 21 => Service::Ftp,
        80 => Service::Http,
        443 => Service::Https,
        9418 => Service::Git,
        23 => Service::Telnet,
        22 => Service::Ssh,
        6000..=6063 => Service::X11,
        53 => Service::Dns,
        123 => Service::Ntp,
        _ => Service::Other,
    }
}

/// TCP flag bits carried into the feature row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpFlags {
    pub syn: bool,
    pub ack: bool,
    pub psh: bool,
    pub urg: bool,
}

/// One dissected packet.
///
/// Ports are present iff the transport is TCP/UDP and the frame is a first
/// fragment; tcp_flags/tcp_seq/tcp_window are present iff TCP. `ttl` comes
/// from the IP header when there is one. `length` is the captured byte
/// count and `raw_bytes` the full captured frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedPacket {
    pub timestamp: f64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Protocol,
    pub tcp_flags: Option<TcpFlags>,
    pub tcp_seq: Option<u32>,
    pub tcp_window: Option<u16>,
    pub ttl: Option<u8>,
    pub length: u32,
    pub raw_bytes: Vec<u8>,
}

impl ParsedPacket {
    pub fn service(&self) -> Service {
        match (self.src_port, self.dst_port) {
            (Some(s), Some(d)) => infer_service(s, d),
            _ => Service::Other,
        }
    }
}

/// Direction of a packet on its canonical edge (i, k), i < k:
/// 0 for i→k, 1 for k→i.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn bit(self) -> f64 {
        match self {
            Direction::Forward => 0.0,
            Direction::Reverse => 1.0,
        }
    }
}

/// Channel type, which selects the loss term applied to its columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Binary,
    Categorical { cardinality: usize },
    Numerical,
}

impl ChannelKind {
    pub fn width(self) -> usize {
        match self {
            ChannelKind::Categorical { cardinality } => cardinality,
            _ => 1,
        }
    }
}

/// How a numerical channel is squashed into a bounded range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Used by binary and one-hot channels.
    None,
    /// log1p(x) / log1p(65535).
    Log1pOverLog1pU16,
    /// log1p(seconds) clamped to [0, 10].
    Log1pClamp10,
    /// x / 65535.
    DivU16Max,
    /// x / 2^32.
    DivU32Range,
    /// x / 255.
    DivU8Max,
}

/// One named channel of the feature row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub kind: ChannelKind,
    pub normalization: Normalization,
}

/// Which feature encoding to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    Tcp,
    Byte,
}

impl std::fmt::Display for SchemaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchemaKind::Tcp => "tcp",
            SchemaKind::Byte => "byte",
        })
    }
}

#[derive(Debug, Error)]
#[error("unknown schema '{0}' (expected 'tcp' or 'byte')")]
pub struct UnknownSchema(pub String);

impl std::str::FromStr for SchemaKind {
    type Err = UnknownSchema;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(SchemaKind::Tcp),
            "byte" => Ok(SchemaKind::Byte),
            other => Err(UnknownSchema(other.to_string())),
        }
    }
}

/// A contiguous one-hot column span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoricalGroup {
    pub start: usize,
    pub len: usize,
}

/// Feature row layout: an ordered list of typed channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub kind: SchemaKind,
    pub channels: Vec<Channel>,
}

/// Encoded packet row plus its padding flag.
#[derive(Clone, Debug, PartialEq)]
pub struct PacketVector {
    pub values: Vec<f64>,
    /// true = real packet, false = padding.
    pub mask: bool,
}

impl PacketVector {
    pub fn padding(width: usize) -> PacketVector {
        PacketVector { values: vec![0.0; width], mask: false }
    }
}

const LOG1P_U16: f64 = 11.090339630053647; // ln(1 + 65535)

fn norm_len(len: u32) -> f64 {
    (1.0 + len as f64).ln() / LOG1P_U16
}

fn ch(name: &str, kind: ChannelKind, normalization: Normalization) -> Channel {
    Channel { name: name.to_string(), kind, normalization }
}

/// The TCP-dissection schema: 16 channels, 30 columns.
pub fn tcp_schema() -> Schema {
    use ChannelKind::*;
    use Normalization::*;
    let channels = vec![
        ch("direction", Binary, None),
        ch("tcp syn", Binary, None),
        ch("tcp ack", Binary, None),
        ch("tcp psh", Binary, None),
        ch("tcp urg", Binary, None),
        ch("protocol", Categorical { cardinality: Protocol::COUNT }, None),
        ch("service", Categorical { cardinality: Service::COUNT }, None),
        ch("len", Numerical, Log1pOverLog1pU16),
        ch("delta time", Numerical, Log1pClamp10),
        ch("source port", Numerical, DivU16Max),
        ch("dest port", Numerical, DivU16Max),
        ch("tcp seq", Numerical, DivU32Range),
        ch("tcp ttl", Numerical, DivU8Max),
        ch("tcp window", Numerical, DivU16Max),
        ch("port 22 len", Numerical, Log1pOverLog1pU16),
        ch("port 23 len", Numerical, Log1pOverLog1pU16),
    ];
    Schema { kind: SchemaKind::Tcp, channels }
}

/// The raw-byte schema: direction + protocol + len + delta time + 512 frame
/// bytes, 520 columns.
pub fn byte_schema() -> Schema {
    use ChannelKind::*;
    use Normalization::*;
    let mut channels = vec![
        ch("direction", Binary, None),
        ch("protocol", Categorical { cardinality: Protocol::COUNT }, None),
        ch("len", Numerical, Log1pOverLog1pU16),
        ch("delta time", Numerical, Log1pClamp10),
    ];
    for i in 0..512 {
        channels.push(ch(&format!("byte {i}"), Numerical, DivU8Max));
    }
    Schema { kind: SchemaKind::Byte, channels }
}

impl Schema {
    pub fn new(kind: SchemaKind) -> Schema {
        match kind {
            SchemaKind::Tcp => tcp_schema(),
            SchemaKind::Byte => byte_schema(),
        }
    }

    pub fn total_width(&self) -> usize {
        self.channels.iter().map(|c| c.kind.width()).sum()
    }

    /// Column index where each channel starts.
    pub fn channel_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.channels.len());
        let mut at = 0;
        for c in &self.channels {
            offsets.push(at);
            at += c.kind.width();
        }
        offsets
    }

    pub fn binary_cols(&self) -> Vec<usize> {
        let offsets = self.channel_offsets();
        self.channels
            .iter()
            .zip(&offsets)
            .filter(|(c, _)| c.kind == ChannelKind::Binary)
            .map(|(_, &o)| o)
            .collect()
    }

    pub fn numerical_cols(&self) -> Vec<usize> {
        let offsets = self.channel_offsets();
        self.channels
            .iter()
            .zip(&offsets)
            .filter(|(c, _)| c.kind == ChannelKind::Numerical)
            .map(|(_, &o)| o)
            .collect()
    }

    pub fn categorical_groups(&self) -> Vec<CategoricalGroup> {
        let offsets = self.channel_offsets();
        self.channels
            .iter()
            .zip(&offsets)
            .filter_map(|(c, &o)| match c.kind {
                ChannelKind::Categorical { cardinality } => {
                    Some(CategoricalGroup { start: o, len: cardinality })
                }
                _ => None,
            })
            .collect()
    }

    pub fn channel_named(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Encode one packet. `prev_timestamp` is the previous packet's timestamp
    /// on the same edge (the packet's own timestamp for the first one).
    pub fn encode(
        &self,
        pkt: &ParsedPacket,
        prev_timestamp: f64,
        direction: Direction,
    ) -> PacketVector {
        let delta = (pkt.timestamp - prev_timestamp).max(0.0);
        let values = match self.kind {
            SchemaKind::Tcp => self.encode_tcp(pkt, delta, direction),
            SchemaKind::Byte => self.encode_byte(pkt, delta, direction),
        };
        PacketVector { values, mask: true }
    }

    fn encode_tcp(&self, pkt: &ParsedPacket, delta: f64, direction: Direction) -> Vec<f64> {
        let mut row = vec![0.0; self.total_width()];
        row[0] = direction.bit();
        if let Some(f) = pkt.tcp_flags {
            row[1] = f.syn as u8 as f64;
            row[2] = f.ack as u8 as f64;
            row[3] = f.psh as u8 as f64;
            row[4] = f.urg as u8 as f64;
        }
        row[5 + pkt.protocol.index()] = 1.0;
        row[10 + pkt.service().index()] = 1.0;
        row[21] = norm_len(pkt.length);
        row[22] = (1.0 + delta).ln().clamp(0.0, 10.0);
        row[23] = pkt.src_port.map_or(0.0, |p| p as f64 / 65535.0);
        row[24] = pkt.dst_port.map_or(0.0, |p| p as f64 / 65535.0);
        row[25] = pkt.tcp_seq.map_or(0.0, |s| s as f64 / 4294967296.0);
        row[26] = pkt.ttl.map_or(0.0, |t| t as f64 / 255.0);
        row[27] = pkt.tcp_window.map_or(0.0, |w| w as f64 / 65535.0);
        let on_port = |p: u16| pkt.src_port == Some(p) || pkt.dst_port == Some(p);
        row[28] = if on_port(22) { row[21] } else { 0.0 };
        row[29] = if on_port(23) { row[21] } else { 0.0 };
        row
    }

    fn encode_byte(&self, pkt: &ParsedPacket, delta: f64, direction: Direction) -> Vec<f64> {
        let mut row = vec![0.0; self.total_width()];
        row[0] = direction.bit();
        row[1 + pkt.protocol.index()] = 1.0;
        row[6] = norm_len(pkt.length);
        row[7] = (1.0 + delta).ln().clamp(0.0, 10.0);
        for (i, &b) in pkt.raw_bytes.iter().take(512).enumerate() {
            row[8 + i] = b as f64 / 255.0;
        }
        row
    }
}
