use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use super::{CaptureError, Endpoint, PacketRecord, SessionConfig, Transport};

pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
pub const PCAP_MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
const PCAP_MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const PCAP_MAGIC_NANOS_SWAPPED: u32 = 0x4d3c_b2a1;
pub const LINKTYPE_ETHERNET: u32 = 1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const MAX_FRAME_LEN: u32 = 256 * 1024;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const ETHERTYPE_VLAN: u16 = 0x8100;

pub const TCP_FIN: u8 = 0x01;
pub const TCP_SYN: u8 = 0x02;
pub const TCP_PSH: u8 = 0x08;
pub const TCP_ACK: u8 = 0x10;

/// One link-layer frame with its capture timestamp.
#[derive(Debug, Clone)]
pub struct PcapFrame {
    pub timestamp_us: u64,
    pub data: Vec<u8>,
}

/// Pull-based source of Ethernet frames. Implemented by [`PcapReader`]; a live
/// capture is any reader yielding the same frames, e.g. `tcpdump -w -` piped
/// into a `PcapReader`.
pub trait FrameSource {
    fn next_frame(&mut self) -> Result<Option<PcapFrame>, CaptureError>;
}

#[derive(Debug, Clone, Copy)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(arr),
            ByteOrder::Big => u32::from_be_bytes(arr),
        }
    }
}

/// Streaming reader for classic pcap.
pub struct PcapReader<R> {
    inner: R,
    order: ByteOrder,
    nanos: bool,
    offset: usize,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CaptureError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut header)?;
        if got < 4 {
            return Err(CaptureError::Truncated {
                offset: 0,
                needed: GLOBAL_HEADER_LEN,
                available: got,
            });
        }
        let magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let (order, nanos) = match magic {
            PCAP_MAGIC => (ByteOrder::Little, false),
            PCAP_MAGIC_SWAPPED => (ByteOrder::Big, false),
            PCAP_MAGIC_NANOS => (ByteOrder::Little, true),
            PCAP_MAGIC_NANOS_SWAPPED => (ByteOrder::Big, true),
            _ => return Err(CaptureError::BadMagic { offset: 0, magic }),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(CaptureError::Truncated {
                offset: got,
                needed: GLOBAL_HEADER_LEN - got,
                available: 0,
            });
        }
        let link_type = order.u32(&header[20..24]);
        if link_type != LINKTYPE_ETHERNET {
            return Err(CaptureError::UnsupportedLinkType(link_type));
        }
        Ok(Self {
            inner,
            order,
            nanos,
            offset: GLOBAL_HEADER_LEN,
        })
    }
}

impl<R: Read> FrameSource for PcapReader<R> {
    fn next_frame(&mut self) -> Result<Option<PcapFrame>, CaptureError> {
        let mut rh = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut rh)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(CaptureError::Truncated {
                offset: self.offset,
                needed: RECORD_HEADER_LEN,
                available: got,
            });
        }
        let secs = self.order.u32(&rh[0..4]) as u64;
        let frac = self.order.u32(&rh[4..8]) as u64;
        let incl_len = self.order.u32(&rh[8..12]);
        if incl_len > MAX_FRAME_LEN {
            return Err(CaptureError::Truncated {
                offset: self.offset + 8,
                needed: incl_len as usize,
                available: 0,
            });
        }
        let mut data = vec![0u8; incl_len as usize];
        let got = read_full(&mut self.inner, &mut data)?;
        if got < data.len() {
            return Err(CaptureError::Truncated {
                offset: self.offset + RECORD_HEADER_LEN,
                needed: data.len(),
                available: got,
            });
        }
        self.offset += RECORD_HEADER_LEN + data.len();
        let micros = if self.nanos { frac / 1000 } else { frac };
        Ok(Some(PcapFrame {
            timestamp_us: secs * 1_000_000 + micros,
            data,
        }))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Parses a classic pcap capture into the payload records exchanged between
/// the configured app and device, ordered by timestamp.
pub fn parse_capture(
    capture: &[u8],
    config: &SessionConfig,
) -> Result<Vec<PacketRecord>, CaptureError> {
    let mut reader = PcapReader::new(capture)?;
    records_from_source(&mut reader, config)
}

pub fn records_from_source<S: FrameSource + ?Sized>(
    source: &mut S,
    config: &SessionConfig,
) -> Result<Vec<PacketRecord>, CaptureError> {
    let mut epoch = None;
    let mut seen_segments: HashSet<(Endpoint, Endpoint, u32, Vec<u8>)> = HashSet::new();
    let mut records = Vec::new();

    while let Some(frame) = source.next_frame()? {
        let epoch = *epoch.get_or_insert(frame.timestamp_us);
        let Some(seg) = decode_frame(&frame.data) else {
            continue;
        };
        if seg.payload.is_empty() || !config.admits_transport(seg.transport) {
            continue;
        }
        let pair_ok = (config.app.matches(&seg.src) && config.device.matches(&seg.dst))
            || (config.device.matches(&seg.src) && config.app.matches(&seg.dst));
        if !pair_ok {
            continue;
        }
        if let Some(seq) = seg.tcp_seq {
            if !seen_segments.insert((seg.src, seg.dst, seq, seg.payload.to_vec())) {
                continue;
            }
        }
        records.push(PacketRecord {
            timestamp_us: frame.timestamp_us.saturating_sub(epoch),
            src: seg.src,
            dst: seg.dst,
            transport: seg.transport,
            payload: seg.payload.to_vec(),
        });
    }
    records.sort_by_key(|r| r.timestamp_us);
    Ok(records)
}

struct Segment<'a> {
    src: Endpoint,
    dst: Endpoint,
    transport: Transport,
    tcp_seq: Option<u32>,
    payload: &'a [u8],
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn decode_frame(frame: &[u8]) -> Option<Segment<'_>> {
    let mut ethertype = be16(frame, 12)?;
    let mut l3 = 14;
    if ethertype == ETHERTYPE_VLAN {
        ethertype = be16(frame, 16)?;
        l3 = 18;
    }
    let ip = frame.get(l3..)?;
    let (src_ip, dst_ip, proto, l4) = match ethertype {
        ETHERTYPE_IPV4 => {
            if ip.first()? >> 4 != 4 {
                return None;
            }
            let ihl = ((ip[0] & 0x0f) as usize) * 4;
            let total = be16(ip, 2)? as usize;
            let flags_frag = be16(ip, 6)?;
            // fragments are not reassembled
            if flags_frag & 0x3fff != 0 || ihl < 20 || total < ihl || total > ip.len() {
                return None;
            }
            let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
            let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
            (IpAddr::V4(src), IpAddr::V4(dst), ip[9], &ip[ihl..total])
        }
        ETHERTYPE_IPV6 => {
            if ip.len() < 40 || ip[0] >> 4 != 6 {
                return None;
            }
            let plen = be16(ip, 4)? as usize;
            let end = 40 + plen;
            if end > ip.len() {
                return None;
            }
            let src: [u8; 16] = ip[8..24].try_into().ok()?;
            let dst: [u8; 16] = ip[24..40].try_into().ok()?;
            (
                IpAddr::V6(Ipv6Addr::from(src)),
                IpAddr::V6(Ipv6Addr::from(dst)),
                ip[6],
                &ip[40..end],
            )
        }
        _ => return None,
    };

    match proto {
        6 => {
            let off = ((*l4.get(12)? >> 4) as usize) * 4;
            if off < 20 || off > l4.len() {
                return None;
            }
            let seq = u32::from_be_bytes(l4.get(4..8)?.try_into().ok()?);
            Some(Segment {
                src: Endpoint::new(src_ip, be16(l4, 0)?),
                dst: Endpoint::new(dst_ip, be16(l4, 2)?),
                transport: Transport::Tcp,
                tcp_seq: Some(seq),
                payload: &l4[off..],
            })
        }
        17 => {
            let len = be16(l4, 4)? as usize;
            if len < 8 || len > l4.len() {
                return None;
            }
            Some(Segment {
                src: Endpoint::new(src_ip, be16(l4, 0)?),
                dst: Endpoint::new(dst_ip, be16(l4, 2)?),
                transport: Transport::Udp,
                tcp_seq: None,
                payload: &l4[8..len],
            })
        }
        _ => None,
    }
}

/// Writes classic little-endian, microsecond-resolution pcap with Ethernet framing.
pub struct PcapWriter<W: Write> {
    inner: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> std::io::Result<Self> {
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        header.extend_from_slice(&PCAP_MAGIC.to_le_bytes());
        header.extend_from_slice(&2u16.to_le_bytes());
        header.extend_from_slice(&4u16.to_le_bytes());
        header.extend_from_slice(&0i32.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&65535u32.to_le_bytes());
        header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&header)?;
        Ok(Self { inner })
    }

    pub fn write_frame(&mut self, timestamp_us: u64, frame: &[u8]) -> std::io::Result<()> {
        let secs = (timestamp_us / 1_000_000) as u32;
        let micros = (timestamp_us % 1_000_000) as u32;
        let len = frame.len() as u32;
        self.inner.write_all(&secs.to_le_bytes())?;
        self.inner.write_all(&micros.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Builds Ethernet/IP/TCP|UDP frames around payloads.
pub struct SegmentBuilder;

impl SegmentBuilder {
    pub fn udp(src: Endpoint, dst: Endpoint, payload: &[u8]) -> Vec<u8> {
        let mut l4 = Vec::with_capacity(8 + payload.len());
        l4.extend_from_slice(&src.port.to_be_bytes());
        l4.extend_from_slice(&dst.port.to_be_bytes());
        l4.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
        l4.extend_from_slice(&[0, 0]);
        l4.extend_from_slice(payload);
        let sum = transport_checksum(src.addr, dst.addr, 17, &l4);
        l4[6..8].copy_from_slice(&(if sum == 0 { 0xffff } else { sum }).to_be_bytes());
        Self::wrap(src, dst, 17, &l4)
    }

    pub fn tcp(
        src: Endpoint,
        dst: Endpoint,
        seq: u32,
        ack: u32,
        flags: u8,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut l4 = Vec::with_capacity(20 + payload.len());
        l4.extend_from_slice(&src.port.to_be_bytes());
        l4.extend_from_slice(&dst.port.to_be_bytes());
        l4.extend_from_slice(&seq.to_be_bytes());
        l4.extend_from_slice(&ack.to_be_bytes());
        l4.push(5 << 4);
        l4.push(flags);
        l4.extend_from_slice(&65535u16.to_be_bytes());
        l4.extend_from_slice(&[0, 0, 0, 0]);
        l4.extend_from_slice(payload);
        let sum = transport_checksum(src.addr, dst.addr, 6, &l4);
        l4[16..18].copy_from_slice(&sum.to_be_bytes());
        Self::wrap(src, dst, 6, &l4)
    }

    fn wrap(src: Endpoint, dst: Endpoint, proto: u8, l4: &[u8]) -> Vec<u8> {
        let mut frame = Vec::with_capacity(14 + 40 + l4.len());
        frame.extend_from_slice(&mac_for(dst.addr));
        frame.extend_from_slice(&mac_for(src.addr));
        match (src.addr, dst.addr) {
            (IpAddr::V4(s), IpAddr::V4(d)) => {
                frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
                let mut ip = [0u8; 20];
                ip[0] = 0x45;
                ip[2..4].copy_from_slice(&((20 + l4.len()) as u16).to_be_bytes());
                ip[6] = 0x40; // don't fragment
                ip[8] = 64;
                ip[9] = proto;
                ip[12..16].copy_from_slice(&s.octets());
                ip[16..20].copy_from_slice(&d.octets());
                let sum = finish_checksum(sum_words(&ip, 0));
                ip[10..12].copy_from_slice(&sum.to_be_bytes());
                frame.extend_from_slice(&ip);
            }
            (s, d) => {
                frame.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
                let mut ip = [0u8; 40];
                ip[0] = 0x60;
                ip[4..6].copy_from_slice(&(l4.len() as u16).to_be_bytes());
                ip[6] = proto;
                ip[7] = 64;
                ip[8..24].copy_from_slice(&v6_octets(s));
                ip[24..40].copy_from_slice(&v6_octets(d));
                frame.extend_from_slice(&ip);
            }
        }
        frame.extend_from_slice(l4);
        frame
    }
}

fn v6_octets(addr: IpAddr) -> [u8; 16] {
    match addr {
        IpAddr::V4(v4) => v4.to_ipv6_mapped().octets(),
        IpAddr::V6(v6) => v6.octets(),
    }
}

fn mac_for(addr: IpAddr) -> [u8; 6] {
    let tail = match addr {
        IpAddr::V4(v4) => v4.octets(),
        IpAddr::V6(v6) => {
            let o = v6.octets();
            [o[12], o[13], o[14], o[15]]
        }
    };
    [0x02, 0x00, tail[0], tail[1], tail[2], tail[3]]
}

fn sum_words(data: &[u8], mut acc: u32) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        acc = acc.wrapping_add(u16::from_be_bytes([c[0], c[1]]) as u32);
    }
    if let [last] = chunks.remainder() {
        acc = acc.wrapping_add((*last as u32) << 8);
    }
    acc
}

fn finish_checksum(mut acc: u32) -> u16 {
    while acc >> 16 != 0 {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    !(acc as u16)
}

fn transport_checksum(src: IpAddr, dst: IpAddr, proto: u8, l4: &[u8]) -> u16 {
    let mut acc = 0u32;
    match (src, dst) {
        (IpAddr::V4(s), IpAddr::V4(d)) => {
            acc = sum_words(&s.octets(), acc);
            acc = sum_words(&d.octets(), acc);
            acc = acc.wrapping_add(proto as u32);
            acc = acc.wrapping_add(l4.len() as u32);
        }
        (s, d) => {
            acc = sum_words(&v6_octets(s), acc);
            acc = sum_words(&v6_octets(d), acc);
            acc = acc.wrapping_add(l4.len() as u32);
            acc = acc.wrapping_add(proto as u32);
        }
    }
    finish_checksum(sum_words(l4, acc))
}
