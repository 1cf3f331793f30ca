//! Deterministic synthetic traffic for a small substation-style network.
//!
//! One fixed device roster exchanges periodic polling, time-sync and ARP
//! traffic; attack scenarios overlay extra flows on that background. All
//! jitter comes from a seeded generator and timestamps are integer
//! microseconds, so a given config yields byte-identical captures.

use crate::graph;
use crate::packet::TcpFlags;
use crate::pcap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Normal,
    Flood,
    Scan,
    FailedAuth,
    SettingChange,
}

impl Scenario {
    pub fn all() -> [Scenario; 5] {
        [
            Scenario::Normal,
            Scenario::Flood,
            Scenario::Scan,
            Scenario::FailedAuth,
            Scenario::SettingChange,
        ]
    }

    pub fn attacks() -> [Scenario; 4] {
        [Scenario::Flood, Scenario::Scan, Scenario::FailedAuth, Scenario::SettingChange]
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::Normal => "normal",
            Scenario::Flood => "flood",
            Scenario::Scan => "scan",
            Scenario::FailedAuth => "failed_auth",
            Scenario::SettingChange => "setting_change",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown scenario {0:?}")]
pub struct UnknownScenario(String);

impl FromStr for Scenario {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Scenario::Normal),
            "flood" => Ok(Scenario::Flood),
            "scan" => Ok(Scenario::Scan),
            "failed_auth" => Ok(Scenario::FailedAuth),
            "setting_change" => Ok(Scenario::SettingChange),
            other => Err(UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Device {
    pub name: &'static str,
    pub ip: Ipv4Addr,
    pub mac: [u8; 6],
}

const fn dev(name: &'static str, last_octet: u8) -> Device {
    Device {
        name,
        ip: Ipv4Addr::new(10, 0, 0, last_octet),
        mac: [0x02, 0x4e, 0x53, 0x00, 0x00, last_octet],
    }
}

pub const PC1: Device = dev("pc1", 11);
pub const PC2: Device = dev("pc2", 12);
pub const RELAY1: Device = dev("relay1", 21);
pub const RELAY2: Device = dev("relay2", 22);
pub const METER: Device = dev("meter", 23);
pub const RTAC: Device = dev("rtac", 31);
pub const CLOCK: Device = dev("clock", 41);
pub const SCADA_PC: Device = dev("scada_pc", 51);

pub fn roster() -> [Device; 8] {
    [PC1, PC2, RELAY1, RELAY2, METER, RTAC, CLOCK, SCADA_PC]
}

/// Devices the RTAC polls over the control protocol.
const POLL_TARGETS: [Device; 4] = [RELAY1, RELAY2, METER, SCADA_PC];

pub const CONTROL_PORT: u16 = 20000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scenario: Scenario,
    pub seed: u64,
    /// Total capture length in seconds.
    pub duration_s: f64,
    /// Attack onset, seconds from capture start.
    pub attack_start_s: f64,
    pub attack_duration_s: f64,
    /// Window length used for the label sidecar.
    pub window_s: f64,
    pub flood_pps: u32,
    /// Scan probes per second.
    pub scan_rate: f64,
}

impl SynthConfig {
    pub fn new(scenario: Scenario, seed: u64) -> SynthConfig {
        SynthConfig {
            scenario,
            seed,
            duration_s: 300.0,
            attack_start_s: 60.0,
            attack_duration_s: 120.0,
            window_s: 30.0,
            flood_pps: 2000,
            scan_rate: 5.0,
        }
    }
}

/// Ground-truth sidecar written next to a generated capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureLabels {
    pub scenario: String,
    /// First frame timestamp in seconds; window i spans
    /// [start_time + i*stride, start_time + i*stride + window_seconds).
    pub start_time: f64,
    pub window_seconds: f64,
    pub stride_seconds: f64,
    /// Device responsible for the attack windows, if any.
    pub attacker: Option<String>,
    /// Devices the attack is aimed at.
    pub targets: Vec<String>,
    /// Per-window scenario: "normal" or the attack name.
    pub windows: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    /// (timestamp in microseconds, frame bytes), time-ordered.
    pub frames: Vec<(u64, Vec<u8>)>,
    pub labels: CaptureLabels,
}

// ---- frame construction ----------------------------------------------

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_ARP: u16 = 0x0806;
const BROADCAST: [u8; 6] = [0xff; 6];
const MIN_FRAME: usize = 60;

fn checksum16(chunks: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    for data in chunks {
        let mut iter = data.chunks_exact(2);
        for pair in &mut iter {
            sum += u16::from_be_bytes([pair[0], pair[1]]) as u32;
        }
        if let [last] = iter.remainder() {
            sum += u16::from_be_bytes([*last, 0]) as u32;
        }
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn eth_frame(dst: [u8; 6], src: [u8; 6], ethertype: u16, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(MIN_FRAME.max(14 + payload.len()));
    f.extend_from_slice(&dst);
    f.extend_from_slice(&src);
    f.extend_from_slice(&ethertype.to_be_bytes());
    f.extend_from_slice(payload);
    while f.len() < MIN_FRAME {
        f.push(0);
    }
    f
}

fn ipv4_packet(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, ttl: u8, ident: u16, body: &[u8]) -> Vec<u8> {
    let total = 20 + body.len();
    let mut h = Vec::with_capacity(total);
    h.push(0x45);
    h.push(0);
    h.extend_from_slice(&(total as u16).to_be_bytes());
    h.extend_from_slice(&ident.to_be_bytes());
    h.extend_from_slice(&0x4000u16.to_be_bytes()); // don't fragment
    h.push(ttl);
    h.push(proto);
    h.extend_from_slice(&[0, 0]); // checksum placeholder
    h.extend_from_slice(&src.octets());
    h.extend_from_slice(&dst.octets());
    let ck = checksum16(&[&h]);
    h[10..12].copy_from_slice(&ck.to_be_bytes());
    h.extend_from_slice(body);
    h
}

fn flags_byte(f: TcpFlags) -> u8 {
    (f.syn as u8) << 1 | (f.psh as u8) << 3 | (f.ack as u8) << 4 | (f.urg as u8) << 5
}

#[allow(clippy::too_many_arguments)]
fn tcp_segment(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    sport: u16,
    dport: u16,
    seq: u32,
    ack_no: u32,
    flags: TcpFlags,
    window: u16,
    payload: &[u8],
) -> Vec<u8> {
    let mut seg = Vec::with_capacity(20 + payload.len());
    seg.extend_from_slice(&sport.to_be_bytes());
    seg.extend_from_slice(&dport.to_be_bytes());
    seg.extend_from_slice(&seq.to_be_bytes());
    seg.extend_from_slice(&ack_no.to_be_bytes());
    seg.push(5 << 4);
    seg.push(flags_byte(flags));
    seg.extend_from_slice(&window.to_be_bytes());
    seg.extend_from_slice(&[0, 0, 0, 0]); // checksum + urgent
    seg.extend_from_slice(payload);
    let pseudo = pseudo_header(src, dst, 6, seg.len());
    let ck = checksum16(&[&pseudo, &seg]);
    seg[16..18].copy_from_slice(&ck.to_be_bytes());
    seg
}

fn udp_datagram(src: Ipv4Addr, dst: Ipv4Addr, sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
    let len = 8 + payload.len();
    let mut d = Vec::with_capacity(len);
    d.extend_from_slice(&sport.to_be_bytes());
    d.extend_from_slice(&dport.to_be_bytes());
    d.extend_from_slice(&(len as u16).to_be_bytes());
    d.extend_from_slice(&[0, 0]);
    d.extend_from_slice(payload);
    let pseudo = pseudo_header(src, dst, 17, d.len());
    let ck = checksum16(&[&pseudo, &d]);
    d[6..8].copy_from_slice(&ck.to_be_bytes());
    d
}

fn pseudo_header(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, len: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(12);
    p.extend_from_slice(&src.octets());
    p.extend_from_slice(&dst.octets());
    p.push(0);
    p.push(proto);
    p.extend_from_slice(&(len as u16).to_be_bytes());
    p
}

fn arp_body(oper: u16, sender: &Device, target_ip: Ipv4Addr, target_mac: [u8; 6]) -> Vec<u8> {
    let mut b = Vec::with_capacity(28);
    b.extend_from_slice(&1u16.to_be_bytes()); // ethernet
    b.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    b.push(6);
    b.push(4);
    b.extend_from_slice(&oper.to_be_bytes());
    b.extend_from_slice(&sender.mac);
    b.extend_from_slice(&sender.ip.octets());
    b.extend_from_slice(&target_mac);
    b.extend_from_slice(&target_ip.octets());
    b
}

// ---- traffic builder --------------------------------------------------

struct Builder {
    frames: Vec<(u64, Vec<u8>, bool)>,
    ident: u16,
    attack: bool,
}

const TTL: u8 = 64;

impl Builder {
    fn new() -> Builder {
        Builder { frames: Vec::new(), ident: 1, attack: false }
    }

    fn next_ident(&mut self) -> u16 {
        self.ident = self.ident.wrapping_add(1);
        self.ident
    }

    #[allow(clippy::too_many_arguments)]
    fn tcp(
        &mut self,
        ts: u64,
        src_mac: [u8; 6],
        src_ip: Ipv4Addr,
        dst: &Device,
        sport: u16,
        dport: u16,
        seq: u32,
        ack_no: u32,
        flags: TcpFlags,
        payload: &[u8],
    ) {
        let ident = self.next_ident();
        let seg = tcp_segment(src_ip, dst.ip, sport, dport, seq, ack_no, flags, 8192, payload);
        let ip = ipv4_packet(src_ip, dst.ip, 6, TTL, ident, &seg);
        let frame = eth_frame(dst.mac, src_mac, ETHERTYPE_IPV4, &ip);
        self.frames.push((ts, frame, self.attack));
    }

    #[allow(clippy::too_many_arguments)]
    fn tcp_between(
        &mut self,
        ts: u64,
        src: &Device,
        dst: &Device,
        sport: u16,
        dport: u16,
        seq: u32,
        ack_no: u32,
        flags: TcpFlags,
        payload: &[u8],
    ) {
        self.tcp(ts, src.mac, src.ip, dst, sport, dport, seq, ack_no, flags, payload);
    }

    fn udp_between(
        &mut self,
        ts: u64,
        src: &Device,
        dst: &Device,
        sport: u16,
        dport: u16,
        payload: &[u8],
    ) {
        let ident = self.next_ident();
        let d = udp_datagram(src.ip, dst.ip, sport, dport, payload);
        let ip = ipv4_packet(src.ip, dst.ip, 17, TTL, ident, &d);
        let frame = eth_frame(dst.mac, src.mac, ETHERTYPE_IPV4, &ip);
        self.frames.push((ts, frame, self.attack));
    }

    fn arp_request(&mut self, ts: u64, asker: &Device, about: &Device) {
        let body = arp_body(1, asker, about.ip, [0; 6]);
        let frame = eth_frame(BROADCAST, asker.mac, ETHERTYPE_ARP, &body);
        self.frames.push((ts, frame, self.attack));
    }

    fn arp_reply(&mut self, ts: u64, replier: &Device, to: &Device) {
        let body = arp_body(2, replier, to.ip, to.mac);
        let frame = eth_frame(to.mac, replier.mac, ETHERTYPE_ARP, &body);
        self.frames.push((ts, frame, self.attack));
    }
}

fn payload_bytes(len: usize, tag: u8, counter: u32) -> Vec<u8> {
    let mut p = Vec::with_capacity(len);
    let c = counter.to_be_bytes();
    for i in 0..len {
        p.push(match i {
            0 => tag,
            1..=4 => c[i - 1],
            _ => (i as u8).wrapping_mul(31).wrapping_add(tag),
        });
    }
    p
}

const SECOND: u64 = 1_000_000;

fn jitter(rng: &mut ChaCha8Rng, max_us: u64) -> u64 {
    rng.random_range(0..=max_us)
}

/// TCP connection helper tracking sequence numbers on both sides.
struct Conn<'a> {
    client: &'a Device,
    server: &'a Device,
    sport: u16,
    dport: u16,
    cseq: u32,
    sseq: u32,
}

impl<'a> Conn<'a> {
    fn handshake(&mut self, b: &mut Builder, rng: &mut ChaCha8Rng, t: u64) -> u64 {
        let syn = TcpFlags { syn: true, ack: false, psh: false, urg: false };
        let synack = TcpFlags { syn: true, ack: true, psh: false, urg: false };
        let ack = TcpFlags { syn: false, ack: true, psh: false, urg: false };
        b.tcp_between(t, self.client, self.server, self.sport, self.dport, self.cseq, 0, syn, &[]);
        self.cseq = self.cseq.wrapping_add(1);
        let t2 = t + 1000 + jitter(rng, 2000);
        b.tcp_between(t2, self.server, self.client, self.dport, self.sport, self.sseq, self.cseq, synack, &[]);
        self.sseq = self.sseq.wrapping_add(1);
        let t3 = t2 + 500 + jitter(rng, 1000);
        b.tcp_between(t3, self.client, self.server, self.sport, self.dport, self.cseq, self.sseq, ack, &[]);
        t3
    }

    /// Client sends `len` bytes (PSH), server replies with `resp_len`,
    /// client acks. Returns the last timestamp used.
    #[allow(clippy::too_many_arguments)]
    fn exchange(
        &mut self,
        b: &mut Builder,
        rng: &mut ChaCha8Rng,
        t: u64,
        len: usize,
        resp_len: usize,
        tag: u8,
        counter: u32,
    ) -> u64 {
        let psh = TcpFlags { syn: false, ack: true, psh: true, urg: false };
        let ack = TcpFlags { syn: false, ack: true, psh: false, urg: false };
        let req = payload_bytes(len, tag, counter);
        b.tcp_between(t, self.client, self.server, self.sport, self.dport, self.cseq, self.sseq, psh, &req);
        self.cseq = self.cseq.wrapping_add(len as u32);
        let t2 = t + 2000 + jitter(rng, 5000);
        let resp = payload_bytes(resp_len, tag.wrapping_add(1), counter);
        b.tcp_between(t2, self.server, self.client, self.dport, self.sport, self.sseq, self.cseq, psh, &resp);
        self.sseq = self.sseq.wrapping_add(resp_len as u32);
        let t3 = t2 + 1000 + jitter(rng, 1500);
        b.tcp_between(t3, self.client, self.server, self.sport, self.dport, self.cseq, self.sseq, ack, &[]);
        t3
    }
}

fn gen_normal(b: &mut Builder, rng: &mut ChaCha8Rng, duration_us: u64) {
    // ARP warm-up, then one refresh pair per minute
    let mut t = 100_000;
    for target in &POLL_TARGETS {
        b.arp_request(t, &RTAC, target);
        b.arp_reply(t + 400 + jitter(rng, 300), target, &RTAC);
        t += 20_000;
    }
    let mut arp_t = 60 * SECOND;
    let mut arp_ix = 0usize;
    while arp_t < duration_us {
        let target = &POLL_TARGETS[arp_ix % POLL_TARGETS.len()];
        b.arp_request(arp_t, &RTAC, target);
        b.arp_reply(arp_t + 400 + jitter(rng, 300), target, &RTAC);
        arp_ix += 1;
        arp_t += 60 * SECOND + jitter(rng, SECOND);
    }

    // control-protocol polling: RTAC polls each field device every ~2 s
    for (i, dev) in POLL_TARGETS.iter().enumerate() {
        let mut conn = Conn {
            client: &RTAC,
            server: dev,
            sport: 49100 + i as u16,
            dport: CONTROL_PORT,
            cseq: rng.random::<u32>(),
            sseq: rng.random::<u32>(),
        };
        let start = 500_000 + (i as u64) * 50_000;
        conn.handshake(b, rng, start);
        let mut t = 2 * SECOND + (i as u64) * 250_000;
        let mut poll = 0u32;
        while t < duration_us {
            conn.exchange(b, rng, t, 16, 32, 0x05, poll);
            poll += 1;
            let step = (2 * SECOND) as i64 + rng.random_range(-200_000i64..200_000);
            t = (t as i64 + step.max(100_000)) as u64;
        }
    }

    // time sync: everyone but the clock asks it every ~16 s over UDP
    let clients = [PC1, PC2, RELAY1, RELAY2, METER, RTAC, SCADA_PC];
    for (i, devc) in clients.iter().enumerate() {
        let mut t = (i as u64 + 1) * 1_700_000;
        let mut ntp_payload = [0u8; 48];
        ntp_payload[0] = 0x23; // v4 client
        while t < duration_us {
            b.udp_between(t, devc, &CLOCK, 123, 123, &ntp_payload);
            let mut resp = ntp_payload;
            resp[0] = 0x24; // v4 server
            b.udp_between(t + 2000 + jitter(rng, 3000), &CLOCK, devc, 123, 123, &resp);
            let step = (16 * SECOND) as i64 + rng.random_range(-500_000i64..500_000);
            t = (t as i64 + step.max(SECOND as i64)) as u64;
        }
    }
}

fn gen_flood(b: &mut Builder, rng: &mut ChaCha8Rng, start_us: u64, end_us: u64, pps: u32) {
    let syn = TcpFlags { syn: true, ack: false, psh: false, urg: false };
    let spacing = SECOND as f64 / pps as f64;
    let n = ((end_us - start_us) as f64 / SECOND as f64 * pps as f64) as u64;
    for i in 0..n {
        let base = start_us as f64 + i as f64 * spacing;
        let ts = (base + rng.random_range(0.0..spacing * 0.5)) as u64;
        if ts >= end_us {
            break;
        }
        // half the SYNs carry the attacker's own address, half are spoofed
        // from outside the roster subnet
        let src_ip = if i % 2 == 0 {
            PC1.ip
        } else {
            Ipv4Addr::new(172, 16, rng.random_range(0..4), rng.random_range(1..=64))
        };
        let target = if i % 2 == 0 { &RELAY1 } else { &RELAY2 };
        let sport = rng.random_range(1024..=65535);
        let seq = rng.random::<u32>();
        b.tcp(ts, PC1.mac, src_ip, target, sport, CONTROL_PORT, seq, 0, syn, &[]);
    }
}

fn gen_scan(b: &mut Builder, rng: &mut ChaCha8Rng, start_us: u64, end_us: u64, rate: f64) {
    // the scan goes after the protection relays only
    let targets = [RELAY1, RELAY2];
    let syn = TcpFlags { syn: true, ack: false, psh: false, urg: false };
    let synack = TcpFlags { syn: true, ack: true, psh: false, urg: false };

    // fingerprinting: improbable flag combinations against the control port
    let odd_combos = [
        TcpFlags { syn: true, ack: false, psh: true, urg: true },
        TcpFlags { syn: false, ack: false, psh: false, urg: true },
        TcpFlags { syn: false, ack: false, psh: true, urg: false },
        TcpFlags { syn: true, ack: true, psh: false, urg: false },
        TcpFlags { syn: false, ack: true, psh: false, urg: true },
    ];
    let mut t = start_us;
    for target in &targets {
        for (ci, combo) in odd_combos.iter().enumerate() {
            let sport = 40000 + ci as u16;
            b.tcp_between(t, &PC1, target, sport, CONTROL_PORT, rng.random(), 0, *combo, &[]);
            if combo.syn && !combo.ack {
                // the live control port answers the SYN-bearing probe
                b.tcp_between(
                    t + 1500 + jitter(rng, 1000),
                    target,
                    &PC1,
                    CONTROL_PORT,
                    sport,
                    rng.random(),
                    0,
                    synack,
                    &[],
                );
            }
            t += 200_000 + jitter(rng, 50_000);
        }
    }

    // port sweep: each target gets an equal slice of the remaining time,
    // probed at `rate` ports per second from port 1 upward
    let sweep_start = t;
    if sweep_start >= end_us {
        return;
    }
    let slice = (end_us - sweep_start) / targets.len() as u64;
    let interval = SECOND as f64 / rate;
    for (ti, target) in targets.iter().enumerate() {
        let t0 = sweep_start + ti as u64 * slice;
        let n = (slice as f64 / SECOND as f64 * rate) as u64;
        for k in 0..n {
            let ts = (t0 as f64 + k as f64 * interval
                + rng.random_range(0.0..interval * 0.2)) as u64;
            if ts >= t0 + slice {
                break;
            }
            let port = (k % 65535 + 1) as u16;
            let sport = rng.random_range(42000..52000);
            b.tcp_between(ts, &PC1, target, sport, port, rng.random(), 0, syn, &[]);
        }
    }
}

fn gen_failed_auth(b: &mut Builder, rng: &mut ChaCha8Rng, start_us: u64) {
    let relays = [RELAY1, RELAY2];
    let ports: [u16; 2] = [22, 23];
    let mut flow = 0u16;
    for (ri, relay) in relays.iter().enumerate() {
        for (pi, &port) in ports.iter().enumerate() {
            let base = start_us + (ri as u64 * 60 + pi as u64 * 30) * SECOND;
            let mut last = base;
            for attempt in 0..3u32 {
                let t = base + attempt as u64 * 8 * SECOND + jitter(rng, 500_000);
                let mut conn = Conn {
                    client: &PC2,
                    server: relay,
                    sport: 51000 + flow,
                    dport: port,
                    cseq: rng.random(),
                    sseq: rng.random(),
                };
                flow += 1;
                let t1 = conn.handshake(b, rng, t);
                // credential try and terse rejection
                last = conn.exchange(b, rng, t1 + 50_000, 32, 16, 0x41, attempt);
            }
            // the relay raises an alarm to the controller after the third
            // failure on each service
            let mut alarm = Conn {
                client: relay,
                server: &RTAC,
                sport: 52000 + flow,
                dport: CONTROL_PORT,
                cseq: rng.random(),
                sseq: rng.random(),
            };
            let t_alarm = last + 1_500_000 + jitter(rng, 200_000);
            let ta = alarm.handshake(b, rng, t_alarm);
            let ta = alarm.exchange(b, rng, ta + 10_000, 48, 16, 0x81, 0);
            alarm.exchange(b, rng, ta + 150_000, 48, 16, 0x81, 1);
        }
    }
}

fn gen_setting_change(b: &mut Builder, rng: &mut ChaCha8Rng, start_us: u64) {
    let relays = [RELAY1, RELAY2];
    for (ri, relay) in relays.iter().enumerate() {
        let base = start_us + ri as u64 * 50 * SECOND;
        let mut conn = Conn {
            client: &PC2,
            server: relay,
            sport: 53000 + ri as u16,
            dport: 22,
            cseq: rng.random(),
            sseq: rng.random(),
        };
        let t_open = base + jitter(rng, 300_000);
        let t = conn.handshake(b, rng, t_open);
        // successful login: banner, then an accepted credential exchange
        let t = conn.exchange(b, rng, t + 30_000, 24, 24, 0x53, 0);
        let t = conn.exchange(b, rng, t + 40_000, 64, 32, 0x53, 1);

        // the relay reports the login to the controller right away
        let mut alarm = Conn {
            client: relay,
            server: &RTAC,
            sport: 54000 + ri as u16,
            dport: CONTROL_PORT,
            cseq: rng.random(),
            sseq: rng.random(),
        };
        let t_alarm = t + SECOND + jitter(rng, 300_000);
        let mut ta = alarm.handshake(b, rng, t_alarm);
        for k in 0..3u32 {
            ta = alarm.exchange(b, rng, ta + 60_000, 64, 16, 0x91, k);
        }

        // the actual setting writes dwarf the failed-auth payloads
        let t = conn.exchange(b, rng, ta + 2 * SECOND, 256, 128, 0x54, 0);
        let t = conn.exchange(b, rng, t + 80_000, 384, 64, 0x54, 1);
        let t = conn.exchange(b, rng, t + 80_000, 320, 96, 0x54, 2);

        // and a second alarm burst follows the change itself
        let mut ta = t + SECOND + jitter(rng, 300_000);
        for k in 0..3u32 {
            ta = alarm.exchange(b, rng, ta + 60_000, 64, 16, 0x92, k);
        }
    }
}

/// Microseconds to seconds with the same arithmetic the capture reader
/// uses, so label windows line up exactly.
pub fn micros_to_seconds(us: u64) -> f64 {
    (us / SECOND) as f64 + (us % SECOND) as f64 * 1e-6
}

pub fn generate(config: &SynthConfig) -> SynthOutput {
    assert!(config.duration_s > 0.0 && config.window_s > 0.0);
    let mut b = Builder::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let duration_us = (config.duration_s * SECOND as f64) as u64;
    gen_normal(&mut b, &mut rng, duration_us);

    let start_us = (config.attack_start_s * SECOND as f64) as u64;
    let end_us =
        (start_us + (config.attack_duration_s * SECOND as f64) as u64).min(duration_us);
    b.attack = true;
    match config.scenario {
        Scenario::Normal => {}
        Scenario::Flood => gen_flood(&mut b, &mut rng, start_us, end_us, config.flood_pps),
        Scenario::Scan => gen_scan(&mut b, &mut rng, start_us, end_us, config.scan_rate),
        Scenario::FailedAuth => gen_failed_auth(&mut b, &mut rng, start_us),
        Scenario::SettingChange => gen_setting_change(&mut b, &mut rng, start_us),
    }

    let mut frames = b.frames;
    frames.sort_by_key(|(ts, _, _)| *ts);

    let t0 = micros_to_seconds(frames.first().expect("nonempty capture").0);
    let t_last = micros_to_seconds(frames.last().expect("nonempty capture").0);
    let count = graph::window_count(t0, t_last, config.window_s);
    let mut windows = vec![Scenario::Normal.to_string(); count];
    for (ts, _, attack) in &frames {
        if *attack {
            let ix = ((micros_to_seconds(*ts) - t0) / config.window_s) as usize;
            if ix < count {
                windows[ix] = config.scenario.to_string();
            }
        }
    }
    let attacker = match config.scenario {
        Scenario::Normal => None,
        Scenario::Flood | Scenario::Scan => Some(PC1.ip.to_string()),
        Scenario::FailedAuth | Scenario::SettingChange => Some(PC2.ip.to_string()),
    };
    let targets: Vec<String> = match config.scenario {
        Scenario::Normal => Vec::new(),
        _ => vec![RELAY1.ip.to_string(), RELAY2.ip.to_string()],
    };
    SynthOutput {
        frames: frames.into_iter().map(|(ts, f, _)| (ts, f)).collect(),
        labels: CaptureLabels {
            scenario: config.scenario.to_string(),
            start_time: t0,
            window_seconds: config.window_s,
            stride_seconds: config.window_s,
            attacker,
            targets,
            windows,
        },
    }
}

/// Write `<stem>.pcap` and `<stem>.labels.json`; returns both paths.
pub fn write_capture(stem: &Path, output: &SynthOutput) -> std::io::Result<(PathBuf, PathBuf)> {
    let pcap_path = stem.with_extension("pcap");
    pcap::write_pcap(&pcap_path, &output.frames)?;
    let labels_path = labels_path_for(&pcap_path);
    let file = std::fs::File::create(&labels_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &output.labels)?;
    Ok((pcap_path, labels_path))
}

/// Sidecar path convention: capture.pcap -> capture.labels.json.
pub fn labels_path_for(pcap_path: &Path) -> PathBuf {
    let stem = pcap_path.file_stem().and_then(|s| s.to_str()).unwrap_or("capture");
    pcap_path.with_file_name(format!("{stem}.labels.json"))
}
