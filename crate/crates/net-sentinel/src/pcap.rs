//! Classic PCAP reading/writing and Ethernet frame dissection.
//!
//! Only the classic format is handled: 24-byte global header, 16-byte record
//! headers, microsecond or nanosecond timestamps, either endianness. PCAPNG
//! is rejected with a pointed error. Dissection is best-effort and bounded:
//! it never reads past the frame and never panics on malformed input.

use crate::packet::{ParsedPacket, Protocol, TcpFlags};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;
use thiserror::Error;

pub const MAGIC_MICRO: u32 = 0xA1B2_C3D4;
pub const MAGIC_MICRO_SWAPPED: u32 = 0xD4C3_B2A1;
pub const MAGIC_NANO: u32 = 0xA1B2_3C4D;
pub const MAGIC_NANO_SWAPPED: u32 = 0x4D3C_B2A1;
const MAGIC_PCAPNG: u32 = 0x0A0D_0D0A;

pub const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("failed to read capture: {0}")]
    Io(#[from] std::io::Error),
    #[error("file is pcapng, not classic pcap; convert it (e.g. `tshark -F pcap`)")]
    PcapNg,
    #[error("bad capture magic 0x{0:08x}: not a pcap file")]
    BadMagic(u32),
    #[error("file too short for the 24-byte pcap global header")]
    ShortHeader,
    #[error("unsupported link type {0} (only Ethernet, link type 1, is supported)")]
    UnsupportedLinkType(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimestampResolution {
    Micro,
    Nano,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PcapHeader {
    pub magic: u32,
    pub version: (u16, u16),
    pub snaplen: u32,
    pub link_type: u32,
    pub resolution: TimestampResolution,
    /// Multi-byte fields are byte-swapped relative to this host's order.
    pub swapped: bool,
}

fn read_u16(b: &[u8], swapped: bool) -> u16 {
    let v: [u8; 2] = b[..2].try_into().unwrap();
    if swapped {
        u16::from_be_bytes(v)
    } else {
        u16::from_le_bytes(v)
    }
}

fn read_u32(b: &[u8], swapped: bool) -> u32 {
    let v: [u8; 4] = b[..4].try_into().unwrap();
    if swapped {
        u32::from_be_bytes(v)
    } else {
        u32::from_le_bytes(v)
    }
}

/// Parse the 24-byte global header.
pub fn parse_global_header(bytes: &[u8]) -> Result<PcapHeader, PcapError> {
    if bytes.len() < 24 {
        return Err(PcapError::ShortHeader);
    }
    let magic = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    let (resolution, swapped) = match magic {
        MAGIC_MICRO => (TimestampResolution::Micro, false),
        MAGIC_MICRO_SWAPPED => (TimestampResolution::Micro, true),
        MAGIC_NANO => (TimestampResolution::Nano, false),
        MAGIC_NANO_SWAPPED => (TimestampResolution::Nano, true),
        MAGIC_PCAPNG => return Err(PcapError::PcapNg),
        other if other.swap_bytes() == MAGIC_PCAPNG => return Err(PcapError::PcapNg),
        other => return Err(PcapError::BadMagic(other)),
    };
    let header = PcapHeader {
        magic,
        version: (read_u16(&bytes[4..], swapped), read_u16(&bytes[6..], swapped)),
        snaplen: read_u32(&bytes[16..], swapped),
        link_type: read_u32(&bytes[20..], swapped),
        resolution,
        swapped,
    };
    if header.link_type != LINKTYPE_ETHERNET {
        return Err(PcapError::UnsupportedLinkType(header.link_type));
    }
    Ok(header)
}

/// One capture record, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub ts_sec: u32,
    pub ts_subsec: u32,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

impl RawRecord {
    pub fn timestamp(&self, resolution: TimestampResolution) -> f64 {
        let scale = match resolution {
            TimestampResolution::Micro => 1e-6,
            TimestampResolution::Nano => 1e-9,
        };
        self.ts_sec as f64 + self.ts_subsec as f64 * scale
    }
}

/// Streaming reader over a classic pcap file.
#[derive(Debug)]
pub struct CaptureStream<R: Read> {
    pub header: PcapHeader,
    reader: R,
    truncated: usize,
    done: bool,
}

impl CaptureStream<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, PcapError> {
        let file = File::open(path)?;
        CaptureStream::new(BufReader::new(file))
    }
}

impl<R: Read> CaptureStream<R> {
    pub fn new(mut reader: R) -> Result<Self, PcapError> {
        let mut hdr = [0u8; 24];
        let mut filled = 0;
        while filled < 24 {
            let n = reader.read(&mut hdr[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled < 4 {
            // Too short to even carry a magic; treat as not-a-pcap.
            return Err(PcapError::BadMagic(0));
        }
        if filled < 24 {
            let magic = u32::from_le_bytes(hdr[..4].try_into().unwrap());
            return Err(match magic {
                MAGIC_MICRO | MAGIC_MICRO_SWAPPED | MAGIC_NANO | MAGIC_NANO_SWAPPED => {
                    PcapError::ShortHeader
                }
                MAGIC_PCAPNG => PcapError::PcapNg,
                other if other.swap_bytes() == MAGIC_PCAPNG => PcapError::PcapNg,
                other => PcapError::BadMagic(other),
            });
        }
        let header = parse_global_header(&hdr)?;
        Ok(CaptureStream { header, reader, truncated: 0, done: false })
    }

    /// Records dropped because the file ended mid-record.
    pub fn truncated(&self) -> usize {
        self.truncated
    }

    fn read_record(&mut self) -> Result<Option<RawRecord>, PcapError> {
        if self.done {
            return Ok(None);
        }
        let mut hdr = [0u8; 16];
        let mut filled = 0;
        while filled < 16 {
            let n = self.reader.read(&mut hdr[filled..])?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            self.done = true;
            return Ok(None);
        }
        if filled < 16 {
            self.truncated += 1;
            self.done = true;
            return Ok(None);
        }
        let s = self.header.swapped;
        let ts_sec = read_u32(&hdr[0..], s);
        let ts_subsec = read_u32(&hdr[4..], s);
        let incl_len = read_u32(&hdr[8..], s);
        let orig_len = read_u32(&hdr[12..], s);
        // take() bounds the allocation at what the stream actually holds,
        // so a corrupt incl_len cannot force a huge buffer.
        let mut data = Vec::new();
        (&mut self.reader).take(incl_len as u64).read_to_end(&mut data)?;
        if data.len() < incl_len as usize {
            self.truncated += 1;
            self.done = true;
            return Ok(None);
        }
        Ok(Some(RawRecord { ts_sec, ts_subsec, orig_len, data }))
    }
}

impl<R: Read> Iterator for CaptureStream<R> {
    type Item = Result<RawRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_record().transpose()
    }
}

/// Everything read from one capture file.
#[derive(Clone, Debug)]
pub struct Capture {
    pub header: PcapHeader,
    /// Dissected packets, stable-sorted by timestamp.
    pub packets: Vec<ParsedPacket>,
    /// Records the file ended in the middle of.
    pub truncated_records: usize,
    /// Frames that could not be dissected (non-IP/ARP, short headers).
    pub undissectable: usize,
}

/// Read and dissect a whole capture file.
pub fn read_pcap(path: &Path) -> Result<Capture, PcapError> {
    let mut stream = CaptureStream::open(path)?;
    let header = stream.header;
    let resolution = header.resolution;
    let mut packets = Vec::new();
    let mut undissectable = 0;
    for record in stream.by_ref() {
        let record = record?;
        let ts = record.timestamp(resolution);
        match dissect(&record.data, ts) {
            Ok(p) => packets.push(p),
            Err(Undissectable) => undissectable += 1,
        }
    }
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(Capture { header, packets, truncated_records: stream.truncated(), undissectable })
}

/// Read raw records without dissecting (round-trip checks, label alignment).
pub fn read_raw(path: &Path) -> Result<(PcapHeader, Vec<RawRecord>, usize), PcapError> {
    let mut stream = CaptureStream::open(path)?;
    let header = stream.header;
    let mut records = Vec::new();
    for r in stream.by_ref() {
        records.push(r?);
    }
    Ok((header, records, stream.truncated()))
}

/// Write a classic pcap (little-endian, microsecond) from (micros, frame)
/// records. Timestamps must be microseconds since the epoch.
pub fn write_pcap(path: &Path, records: &[(u64, Vec<u8>)]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC_MICRO.to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&4u16.to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?; // thiszone
    out.write_all(&0u32.to_le_bytes())?; // sigfigs
    out.write_all(&65535u32.to_le_bytes())?; // snaplen
    out.write_all(&LINKTYPE_ETHERNET.to_le_bytes())?;
    for (micros, frame) in records {
        let sec = (micros / 1_000_000) as u32;
        let usec = (micros % 1_000_000) as u32;
        let len = frame.len() as u32;
        out.write_all(&sec.to_le_bytes())?;
        out.write_all(&usec.to_le_bytes())?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(frame)?;
    }
    out.flush()
}

/// Frame could not be reduced to a ParsedPacket; counted and skipped upstream.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("frame is not dissectable (non-IP/ARP or truncated headers)")]
pub struct Undissectable;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETHERTYPE_IPV6: u16 = 0x86DD;

fn get<const N: usize>(b: &[u8], at: usize) -> Option<[u8; N]> {
    b.get(at..at + N)?.try_into().ok()
}

struct Transport {
    src_port: Option<u16>,
    dst_port: Option<u16>,
    tcp_flags: Option<TcpFlags>,
    tcp_seq: Option<u32>,
    tcp_window: Option<u16>,
}

impl Transport {
    fn none() -> Transport {
        Transport { src_port: None, dst_port: None, tcp_flags: None, tcp_seq: None, tcp_window: None }
    }
}

fn parse_tcp(seg: &[u8]) -> Transport {
    let mut t = Transport::none();
    if let (Some(sp), Some(dp)) = (get::<2>(seg, 0), get::<2>(seg, 2)) {
        t.src_port = Some(u16::from_be_bytes(sp));
        t.dst_port = Some(u16::from_be_bytes(dp));
    }
    if let Some(seq) = get::<4>(seg, 4) {
        t.tcp_seq = Some(u32::from_be_bytes(seq));
    }
    if let Some(&flags) = seg.get(13) {
        t.tcp_flags = Some(TcpFlags {
            syn: flags & 0x02 != 0,
            ack: flags & 0x10 != 0,
            psh: flags & 0x08 != 0,
            urg: flags & 0x20 != 0,
        });
    }
    if let Some(w) = get::<2>(seg, 14) {
        t.tcp_window = Some(u16::from_be_bytes(w));
    }
    t
}

fn parse_udp(seg: &[u8]) -> Transport {
    let mut t = Transport::none();
    if let (Some(sp), Some(dp)) = (get::<2>(seg, 0), get::<2>(seg, 2)) {
        t.src_port = Some(u16::from_be_bytes(sp));
        t.dst_port = Some(u16::from_be_bytes(dp));
    }
    t
}

/// Dissect one Ethernet frame. Returns `Undissectable` for frames below the
/// Ethernet minimum or with an ethertype other than ARP/IPv4/IPv6 (one VLAN
/// tag is skipped transparently).
pub fn dissect(frame: &[u8], timestamp: f64) -> Result<ParsedPacket, Undissectable> {
    if frame.len() < 14 {
        return Err(Undissectable);
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut at = 14;
    if ethertype == ETHERTYPE_VLAN {
        let inner = get::<2>(frame, at + 2).ok_or(Undissectable)?;
        ethertype = u16::from_be_bytes(inner);
        at += 4;
    }
    let body = &frame[at..];
    let (src_ip, dst_ip, protocol, transport, ttl) = match ethertype {
        ETHERTYPE_ARP => {
            // hw type(2) proto type(2) hlen(1) plen(1) opcode(2)
            // sender mac(6) sender ip(4) target mac(6) target ip(4)
            let sender = get::<4>(body, 14).ok_or(Undissectable)?;
            let target = get::<4>(body, 24).ok_or(Undissectable)?;
            (
                IpAddr::V4(Ipv4Addr::from(sender)),
                IpAddr::V4(Ipv4Addr::from(target)),
                Protocol::Arp,
                Transport::none(),
                None,
            )
        }
        ETHERTYPE_IPV4 => {
            let ihl_byte = *body.first().ok_or(Undissectable)?;
            if ihl_byte >> 4 != 4 {
                return Err(Undissectable);
            }
            let header_len = ((ihl_byte & 0x0F) as usize) * 4;
            if header_len < 20 || body.len() < header_len {
                return Err(Undissectable);
            }
            let src = get::<4>(body, 12).ok_or(Undissectable)?;
            let dst = get::<4>(body, 16).ok_or(Undissectable)?;
            let ttl = body[8];
            let ip_proto = body[9];
            let frag = u16::from_be_bytes([body[6], body[7]]);
            let frag_offset = frag & 0x1FFF;
            let seg = &body[header_len..];
            let (protocol, transport) = match ip_proto {
                6 if frag_offset == 0 => (Protocol::Tcp, parse_tcp(seg)),
                6 => (Protocol::Tcp, Transport::none()),
                17 if frag_offset == 0 => (Protocol::Udp, parse_udp(seg)),
                17 => (Protocol::Udp, Transport::none()),
                _ => (Protocol::Ip, Transport::none()),
            };
            (
                IpAddr::V4(Ipv4Addr::from(src)),
                IpAddr::V4(Ipv4Addr::from(dst)),
                protocol,
                transport,
                Some(ttl),
            )
        }
        ETHERTYPE_IPV6 => {
            if body.len() < 40 {
                return Err(Undissectable);
            }
            let src = get::<16>(body, 8).ok_or(Undissectable)?;
            let dst = get::<16>(body, 24).ok_or(Undissectable)?;
            let next = body[6];
            let hop_limit = body[7];
            let seg = &body[40..];
            let (protocol, transport) = match next {
                6 => (Protocol::Tcp, parse_tcp(seg)),
                17 => (Protocol::Udp, parse_udp(seg)),
                _ => (Protocol::Ipv6, Transport::none()),
            };
            (
                IpAddr::V6(Ipv6Addr::from(src)),
                IpAddr::V6(Ipv6Addr::from(dst)),
                protocol,
                transport,
                Some(hop_limit),
            )
        }
        _ => return Err(Undissectable),
    };
    Ok(ParsedPacket {
        timestamp,
        src_ip,
        dst_ip,
        src_port: transport.src_port,
        dst_port: transport.dst_port,
        protocol,
        tcp_flags: transport.tcp_flags,
        tcp_seq: transport.tcp_seq,
        tcp_window: transport.tcp_window,
        ttl,
        length: frame.len() as u32,
        raw_bytes: frame.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled Ethernet+IPv4+TCP SYN frame, 54 bytes.
    pub(crate) fn tcp_syn_frame() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(&[0x02, 0x4E, 0x53, 0, 0, 0x21]); // dst mac
        f.extend_from_slice(&[0x02, 0x4E, 0x53, 0, 0, 0x11]); // src mac
        f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        // IPv4: version 4, ihl 5, total len 40, ttl 64, proto tcp
        f.extend_from_slice(&[0x45, 0x00]);
        f.extend_from_slice(&40u16.to_be_bytes());
        f.extend_from_slice(&[0x00, 0x01, 0x00, 0x00]); // id, flags/frag
        f.push(64); // ttl
        f.push(6); // tcp
        f.extend_from_slice(&[0x00, 0x00]); // checksum (unverified)
        f.extend_from_slice(&[10, 0, 0, 11]); // src
        f.extend_from_slice(&[10, 0, 0, 21]); // dst
        // TCP: sport 49152, dport 20000, seq 1000, ack 0
        f.extend_from_slice(&49152u16.to_be_bytes());
        f.extend_from_slice(&20000u16.to_be_bytes());
        f.extend_from_slice(&1000u32.to_be_bytes());
        f.extend_from_slice(&0u32.to_be_bytes());
        f.push(0x50); // data offset 5
        f.push(0x02); // SYN
        f.extend_from_slice(&8192u16.to_be_bytes()); // window
        f.extend_from_slice(&[0, 0, 0, 0]); // checksum, urgent
        assert_eq!(f.len(), 54);
        f
    }

    fn arp_request_frame() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(&[0xFF; 6]); // broadcast
        f.extend_from_slice(&[0x02, 0x4E, 0x53, 0, 0, 0x31]);
        f.extend_from_slice(&ETHERTYPE_ARP.to_be_bytes());
        f.extend_from_slice(&[0x00, 0x01]); // ethernet
        f.extend_from_slice(&[0x08, 0x00]); // ipv4
        f.push(6);
        f.push(4);
        f.extend_from_slice(&[0x00, 0x01]); // request
        f.extend_from_slice(&[0x02, 0x4E, 0x53, 0, 0, 0x31]);
        f.extend_from_slice(&[10, 0, 0, 31]); // sender ip
        f.extend_from_slice(&[0; 6]);
        f.extend_from_slice(&[10, 0, 0, 21]); // target ip
        f
    }

    fn valid_pcap_bytes() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC_MICRO.to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&4u16.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&65535u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        let frame = tcp_syn_frame();
        b.extend_from_slice(&100u32.to_le_bytes()); // sec
        b.extend_from_slice(&250000u32.to_le_bytes()); // usec
        b.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        b.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        b.extend_from_slice(&frame);
        b
    }

    #[test]
    fn global_header_all_magics() {
        for (magic_bytes, resolution, swapped) in [
            (MAGIC_MICRO.to_le_bytes(), TimestampResolution::Micro, false),
            (MAGIC_MICRO.to_be_bytes(), TimestampResolution::Micro, true),
            (MAGIC_NANO.to_le_bytes(), TimestampResolution::Nano, false),
            (MAGIC_NANO.to_be_bytes(), TimestampResolution::Nano, true),
        ] {
            let mut hdr = [0u8; 24];
            hdr[..4].copy_from_slice(&magic_bytes);
            // link type 1 in matching endianness
            if swapped {
                hdr[20..24].copy_from_slice(&1u32.to_be_bytes());
            } else {
                hdr[20..24].copy_from_slice(&1u32.to_le_bytes());
            }
            let h = parse_global_header(&hdr).unwrap();
            assert_eq!(h.resolution, resolution);
            assert_eq!(h.swapped, swapped);
            assert_eq!(h.link_type, 1);
        }
    }

    #[test]
    fn pcapng_rejected_with_clear_error() {
        let mut hdr = [0u8; 24];
        hdr[..4].copy_from_slice(&MAGIC_PCAPNG.to_le_bytes());
        match parse_global_header(&hdr) {
            Err(PcapError::PcapNg) => {}
            other => panic!("expected PcapNg, got {other:?}"),
        }
    }

    #[test]
    fn unknown_magic_rejected() {
        let mut hdr = [0u8; 24];
        hdr[..4].copy_from_slice(&0xDEADBEEFu32.to_le_bytes());
        assert!(matches!(parse_global_header(&hdr), Err(PcapError::BadMagic(_))));
    }

    #[test]
    fn non_ethernet_link_rejected() {
        let mut hdr = [0u8; 24];
        hdr[..4].copy_from_slice(&MAGIC_MICRO.to_le_bytes());
        hdr[20..24].copy_from_slice(&101u32.to_le_bytes()); // raw IP
        assert!(matches!(parse_global_header(&hdr), Err(PcapError::UnsupportedLinkType(101))));
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let err = CaptureStream::new(std::io::Cursor::new(Vec::<u8>::new())).unwrap_err();
        assert!(matches!(err, PcapError::BadMagic(_)));
    }

    #[test]
    fn single_record_round_trip_fields() {
        let bytes = valid_pcap_bytes();
        let mut stream = CaptureStream::new(std::io::Cursor::new(bytes)).unwrap();
        let rec = stream.next().unwrap().unwrap();
        assert_eq!(rec.ts_sec, 100);
        assert_eq!(rec.ts_subsec, 250000);
        assert_eq!(rec.data, tcp_syn_frame());
        assert!((rec.timestamp(TimestampResolution::Micro) - 100.25).abs() < 1e-9);
        assert!(stream.next().is_none());
        assert_eq!(stream.truncated(), 0);
    }

    #[test]
    fn truncated_mid_record_counts_and_stops() {
        let bytes = valid_pcap_bytes();
        // Slice into the record body.
        let cut = &bytes[..24 + 16 + 10];
        let mut stream = CaptureStream::new(std::io::Cursor::new(cut.to_vec())).unwrap();
        assert!(stream.next().is_none());
        assert_eq!(stream.truncated(), 1);

        // Cut inside the record header.
        let cut = &bytes[..24 + 7];
        let mut stream = CaptureStream::new(std::io::Cursor::new(cut.to_vec())).unwrap();
        assert!(stream.next().is_none());
        assert_eq!(stream.truncated(), 1);
    }

    #[test]
    fn preceding_records_survive_truncation() {
        let mut bytes = valid_pcap_bytes();
        let whole_record = bytes[24..].to_vec();
        bytes.extend_from_slice(&whole_record[..20]); // second record cut short
        let mut stream = CaptureStream::new(std::io::Cursor::new(bytes)).unwrap();
        assert!(stream.next().unwrap().is_ok());
        assert!(stream.next().is_none());
        assert_eq!(stream.truncated(), 1);
    }

    #[test]
    fn dissect_tcp_syn() {
        let frame = tcp_syn_frame();
        let p = dissect(&frame, 1.5).unwrap();
        assert_eq!(p.protocol, Protocol::Tcp);
        assert_eq!(p.src_ip, "10.0.0.11".parse::<IpAddr>().unwrap());
        assert_eq!(p.dst_ip, "10.0.0.21".parse::<IpAddr>().unwrap());
        assert_eq!(p.src_port, Some(49152));
        assert_eq!(p.dst_port, Some(20000));
        let flags = p.tcp_flags.unwrap();
        assert!(flags.syn && !flags.ack && !flags.psh && !flags.urg);
        assert_eq!(p.tcp_seq, Some(1000));
        assert_eq!(p.tcp_window, Some(8192));
        assert_eq!(p.ttl, Some(64));
        assert_eq!(p.length, 54);
        assert_eq!(p.raw_bytes, frame);
    }

    #[test]
    fn dissect_arp_request() {
        let frame = arp_request_frame();
        let p = dissect(&frame, 0.0).unwrap();
        assert_eq!(p.protocol, Protocol::Arp);
        assert_eq!(p.src_ip, "10.0.0.31".parse::<IpAddr>().unwrap());
        assert_eq!(p.dst_ip, "10.0.0.21".parse::<IpAddr>().unwrap());
        assert_eq!(p.src_port, None);
        assert_eq!(p.dst_port, None);
        assert_eq!(p.tcp_flags, None);
    }

    #[test]
    fn dissect_vlan_tagged_frame() {
        let inner = tcp_syn_frame();
        let mut frame = inner[..12].to_vec();
        frame.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
        frame.extend_from_slice(&[0x00, 0x64]); // vlan 100
        frame.extend_from_slice(&inner[12..]); // ethertype + payload
        let p = dissect(&frame, 0.0).unwrap();
        assert_eq!(p.protocol, Protocol::Tcp);
        assert_eq!(p.dst_port, Some(20000));
    }

    #[test]
    fn dissect_rejects_short_and_unknown() {
        assert_eq!(dissect(&[0u8; 10], 0.0), Err(Undissectable));
        let mut frame = tcp_syn_frame();
        frame[12] = 0x88;
        frame[13] = 0xCC; // LLDP
        assert_eq!(dissect(&frame, 0.0), Err(Undissectable));
    }

    #[test]
    fn dissect_ipv4_fragment_has_no_ports() {
        let mut frame = tcp_syn_frame();
        frame[20] = 0x00;
        frame[21] = 0x10; // fragment offset 16
        let p = dissect(&frame, 0.0).unwrap();
        assert_eq!(p.protocol, Protocol::Tcp);
        assert_eq!(p.src_port, None);
        assert_eq!(p.tcp_flags, None);
    }

    #[test]
    fn dissect_udp_and_icmp() {
        let mut frame = tcp_syn_frame();
        frame[23] = 17; // udp
        let p = dissect(&frame, 0.0).unwrap();
        assert_eq!(p.protocol, Protocol::Udp);
        assert_eq!(p.src_port, Some(49152));
        assert_eq!(p.tcp_flags, None);

        frame[23] = 1; // icmp
        let p = dissect(&frame, 0.0).unwrap();
        assert_eq!(p.protocol, Protocol::Ip);
        assert_eq!(p.src_port, None);
    }

    #[test]
    fn dissect_ipv6_tcp() {
        let mut f = Vec::new();
        f.extend_from_slice(&[0u8; 12]);
        f.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
        f.push(0x60); // version 6
        f.extend_from_slice(&[0, 0, 0]); // traffic class / flow
        f.extend_from_slice(&20u16.to_be_bytes()); // payload length
        f.push(6); // next header tcp
        f.push(64); // hop limit
        f.extend_from_slice(&[0x20, 0x01, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        f.extend_from_slice(&[0x20, 0x01, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2]);
        f.extend_from_slice(&443u16.to_be_bytes());
        f.extend_from_slice(&55555u16.to_be_bytes());
        f.extend_from_slice(&[0u8; 16]);
        let p = dissect(&f, 0.0).unwrap();
        assert_eq!(p.protocol, Protocol::Tcp);
        assert_eq!(p.src_port, Some(443));
        assert_eq!(p.ttl, Some(64));
        assert!(matches!(p.src_ip, IpAddr::V6(_)));
    }

    #[test]
    fn write_then_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.pcap");
        let records = vec![
            (1_000_000u64, tcp_syn_frame()),
            (1_500_000u64, arp_request_frame()),
            (2_000_000u64, tcp_syn_frame()),
        ];
        write_pcap(&path, &records).unwrap();
        let (header, raw, truncated) = read_raw(&path).unwrap();
        assert_eq!(truncated, 0);
        assert_eq!(header.resolution, TimestampResolution::Micro);
        assert_eq!(raw.len(), 3);
        for ((micros, frame), rec) in records.iter().zip(&raw) {
            assert_eq!(rec.ts_sec as u64, micros / 1_000_000);
            assert_eq!(rec.ts_subsec as u64, micros % 1_000_000);
            assert_eq!(&rec.data, frame);
            assert_eq!(rec.orig_len as usize, frame.len());
        }
    }

    #[test]
    fn read_pcap_sorts_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sort.pcap");
        let mut bad = tcp_syn_frame();
        bad[12] = 0x88;
        bad[13] = 0xCC;
        // out of order timestamps
        let records =
            vec![(3_000_000u64, tcp_syn_frame()), (1_000_000u64, tcp_syn_frame()), (2_000_000u64, bad)];
        write_pcap(&path, &records).unwrap();
        let cap = read_pcap(&path).unwrap();
        assert_eq!(cap.packets.len(), 2);
        assert_eq!(cap.undissectable, 1);
        assert!(cap.packets[0].timestamp <= cap.packets[1].timestamp);
    }

    #[test]
    fn incl_len_larger_than_remaining_is_truncation_not_alloc() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_MICRO.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes()); // absurd incl_len
        bytes.extend_from_slice(&60u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 30]);
        let mut stream = CaptureStream::new(std::io::Cursor::new(bytes)).unwrap();
        assert!(stream.next().is_none());
        assert_eq!(stream.truncated(), 1);
    }
}
