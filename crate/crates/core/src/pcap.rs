//! Classic libpcap capture ingestion.
//!
//! A capture file is a 24-byte global header followed by records, each a
//! 16-byte record header and `incl_len` bytes of frame data. The magic number
//! selects the byte order used by every other header field.
//!
//! One capture file holds one application's traffic, so labels are assigned
//! per file (see [`parse_pcap`] and [`read_manifest`]).

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAGIC_NATIVE: u32 = 0xa1b2_c3d4;
pub const MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// Link-layer header type numbers from the libpcap registry.
pub mod linktype {
    pub const NULL: u32 = 0;
    pub const ETHERNET: u32 = 1;
    pub const RAW: u32 = 101;
    pub const LINUX_SLL: u32 = 113;
    pub const IPV4: u32 = 228;
    pub const IPV6: u32 = 229;
}

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed pcap header: {0}")]
    MalformedHeader(String),
    #[error("record {index} claims {claimed} bytes but only {remaining} remain")]
    TruncatedRecord {
        index: usize,
        claimed: usize,
        remaining: usize,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("cannot split an empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Timestamp {
    pub secs: u32,
    pub micros: u32,
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    pub bytes: Vec<u8>,
    pub timestamp: Timestamp,
    /// Length on the wire; never smaller than `bytes.len()`.
    pub orig_len: u32,
    /// Link-layer type from the capture's global header.
    pub link_type: u32,
    pub label: Option<String>,
}

impl RawPacket {
    /// An unlabeled packet with a wire length equal to its captured length.
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let orig_len = bytes.len() as u32;
        RawPacket {
            bytes,
            timestamp: Timestamp::default(),
            orig_len,
            link_type: linktype::RAW,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// Packets plus the ordered list of labels they carry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledDataset {
    pub packets: Vec<RawPacket>,
    pub class_names: Vec<String>,
    pub counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a dataset from packets, deriving class names in first-seen order.
    /// Unlabeled packets are skipped.
    pub fn from_packets(packets: impl IntoIterator<Item = RawPacket>) -> Self {
        let mut ds = LabeledDataset::new();
        for p in packets {
            ds.push(p);
        }
        ds
    }

    pub fn push(&mut self, packet: RawPacket) {
        let Some(label) = packet.label.as_deref() else {
            return;
        };
        match self.class_names.iter().position(|c| c == label) {
            Some(i) => self.counts[i] += 1,
            None => {
                self.class_names.push(label.to_string());
                self.counts.push(1);
            }
        }
        self.packets.push(packet);
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn count_of(&self, class: &str) -> usize {
        self.class_names
            .iter()
            .position(|c| c == class)
            .map_or(0, |i| self.counts[i])
    }

    /// Class index of every packet, in packet order.
    pub fn label_indices(&self) -> Vec<usize> {
        let lookup: HashMap<&str, usize> = self
            .class_names
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        self.packets
            .iter()
            .map(|p| lookup[p.label.as_deref().expect("dataset packets are labeled")])
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut counts = vec![0; self.class_names.len()];
        let labels = self.label_indices();
        let packets = indices
            .iter()
            .map(|&i| {
                counts[labels[i]] += 1;
                self.packets[i].clone()
            })
            .collect();
        LabeledDataset {
            packets,
            class_names: self.class_names.clone(),
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self, SplitError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(SplitError::BadFraction(train_fraction));
        }
        Ok(SplitSpec {
            train_fraction,
            seed,
        })
    }
}

/// Positions chosen for each side of a split, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Classes with fewer than two members; their members all went to train.
    pub degenerate: Vec<usize>,
}

/// Stratified selection over a label sequence. Each class keeps
/// `floor(train_fraction * count)` members for training, picked by a
/// seed-determined shuffle of that class's positions.
pub fn stratified_indices(
    labels: &[usize],
    num_classes: usize,
    spec: &SplitSpec,
) -> Result<SplitIndices, SplitError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(SplitError::BadFraction(spec.train_fraction));
    }
    if labels.is_empty() {
        return Err(SplitError::EmptyDataset);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut degenerate = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            degenerate.push(class);
            train.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = (spec.train_fraction * members.len() as f64).floor() as usize;
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices {
        train,
        test,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Names of classes too small to stratify.
    pub degenerate_classes: Vec<String>,
}

/// Stratified, seed-deterministic train/test split.
pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<Split, SplitError> {
    let idx = stratified_indices(&dataset.label_indices(), dataset.class_names.len(), spec)?;
    Ok(Split {
        train: dataset.subset(&idx.train),
        test: dataset.subset(&idx.test),
        degenerate_classes: idx
            .degenerate
            .iter()
            .map(|&c| dataset.class_names[c].clone())
            .collect(),
    })
}

/// Concatenates datasets; class names are unioned in first-seen order.
pub fn merge<I>(datasets: I) -> LabeledDataset
where
    I: IntoIterator<Item = LabeledDataset>,
{
    let mut out = LabeledDataset::new();
    for ds in datasets {
        for (name, &count) in ds.class_names.iter().zip(&ds.counts) {
            match out.class_names.iter().position(|c| c == name) {
                Some(i) => out.counts[i] += count,
                None => {
                    out.class_names.push(name.clone());
                    out.counts.push(count);
                }
            }
        }
        out.packets.extend(ds.packets);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalHeader {
    pub swapped: bool,
    pub version_major: u16,
    pub version_minor: u16,
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub network: u32,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    swapped: bool,
}

impl Cursor<'_> {
    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u32(&mut self) -> u32 {
        let b: [u8; 4] = self.data[self.pos..self.pos + 4].try_into().unwrap();
        self.pos += 4;
        if self.swapped {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn u16(&mut self) -> u16 {
        let b: [u8; 2] = self.data[self.pos..self.pos + 2].try_into().unwrap();
        self.pos += 2;
        if self.swapped {
            u16::from_be_bytes(b)
        } else {
            u16::from_le_bytes(b)
        }
    }
}

/// Reads the global header. Field order is little-endian unless the magic
/// reads back swapped, in which case every field is big-endian.
pub fn parse_global_header(data: &[u8]) -> Result<GlobalHeader, PcapError> {
    if data.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::MalformedHeader(format!(
            "file is {} bytes, global header needs {GLOBAL_HEADER_LEN}",
            data.len()
        )));
    }
    let magic = u32::from_le_bytes(data[..4].try_into().unwrap());
    let swapped = match magic {
        MAGIC_NATIVE => false,
        MAGIC_SWAPPED => true,
        other => {
            return Err(PcapError::MalformedHeader(format!(
                "bad magic 0x{other:08x}"
            )))
        }
    };
    let mut c = Cursor {
        data,
        pos: 4,
        swapped,
    };
    Ok(GlobalHeader {
        swapped,
        version_major: c.u16(),
        version_minor: c.u16(),
        thiszone: c.u32() as i32,
        sigfigs: c.u32(),
        snaplen: c.u32(),
        network: c.u32(),
    })
}

/// Parses an in-memory capture, tagging every record with `label`.
pub fn parse_pcap_bytes(data: &[u8], label: &str) -> Result<LabeledDataset, PcapError> {
    let header = parse_global_header(data)?;
    let mut c = Cursor {
        data,
        pos: GLOBAL_HEADER_LEN,
        swapped: header.swapped,
    };
    let mut packets = Vec::new();
    while c.remaining() > 0 {
        let index = packets.len();
        if c.remaining() < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord {
                index,
                claimed: RECORD_HEADER_LEN,
                remaining: c.remaining(),
            });
        }
        let secs = c.u32();
        let micros = c.u32();
        let incl_len = c.u32() as usize;
        let orig_len = c.u32();
        if incl_len > c.remaining() {
            return Err(PcapError::TruncatedRecord {
                index,
                claimed: incl_len,
                remaining: c.remaining(),
            });
        }
        let bytes = data[c.pos..c.pos + incl_len].to_vec();
        c.pos += incl_len;
        packets.push(RawPacket {
            bytes,
            timestamp: Timestamp { secs, micros },
            orig_len: orig_len.max(incl_len as u32),
            link_type: header.network,
            label: Some(label.to_string()),
        });
    }
    Ok(LabeledDataset::from_packets(packets))
}

/// Parses a capture file; every record gets `label`. A capture with no
/// records yields an empty dataset.
pub fn parse_pcap(path: impl AsRef<Path>, label: &str) -> Result<LabeledDataset, PcapError> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|source| PcapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pcap_bytes(&data, label)
}

/// Serializes packets as a classic capture in the requested byte order.
pub fn write_pcap<W: Write>(
    mut w: W,
    packets: &[RawPacket],
    network: u32,
    big_endian: bool,
) -> io::Result<()> {
    let put32 = |v: u32| {
        if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    };
    let put16 = |v: u16| {
        if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    };
    let snaplen = packets
        .iter()
        .map(|p| p.bytes.len() as u32)
        .max()
        .unwrap_or(0)
        .max(65_535);
    w.write_all(&put32(MAGIC_NATIVE))?;
    w.write_all(&put16(2))?;
    w.write_all(&put16(4))?;
    w.write_all(&put32(0))?;
    w.write_all(&put32(0))?;
    w.write_all(&put32(snaplen))?;
    w.write_all(&put32(network))?;
    for p in packets {
        w.write_all(&put32(p.timestamp.secs))?;
        w.write_all(&put32(p.timestamp.micros))?;
        w.write_all(&put32(p.bytes.len() as u32))?;
        w.write_all(&put32(p.orig_len.max(p.bytes.len() as u32)))?;
        w.write_all(&p.bytes)?;
    }
    Ok(())
}

/// One `<file_path>,<application_name>` manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

/// Parses manifest text. Relative paths resolve against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>, PcapError> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((path, label)) = line.rsplit_once(',') else {
            return Err(PcapError::Manifest {
                line: n + 1,
                message: format!("expected `<file_path>,<application_name>`, got `{line}`"),
            });
        };
        let (path, label) = (path.trim(), label.trim());
        if path.is_empty() || label.is_empty() {
            return Err(PcapError::Manifest {
                line: n + 1,
                message: "empty path or application name".into(),
            });
        }
        let path = Path::new(path);
        entries.push(ManifestEntry {
            path: if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            },
            label: label.to_string(),
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, PcapError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| PcapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Parses every capture named by a manifest and merges them in manifest order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LabeledDataset, PcapError> {
    let parts = read_manifest(path)?
        .into_iter()
        .map(|e| parse_pcap(&e.path, &e.label))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packet(bytes: &[u8], secs: u32, micros: u32) -> RawPacket {
        RawPacket {
            bytes: bytes.to_vec(),
            timestamp: Timestamp { secs, micros },
            orig_len: bytes.len() as u32 + 4,
            link_type: linktype::ETHERNET,
            label: Some("x".into()),
        }
    }

    fn labeled(label: &str, n: usize) -> LabeledDataset {
        LabeledDataset::from_packets(
            (0..n).map(|i| RawPacket::from_bytes(vec![i as u8]).with_label(label)),
        )
    }

    #[test]
    fn native_magic_parses_little_endian_fields() {
        let mut buf = Vec::new();
        write_pcap(&mut buf, &[packet(&[1, 2, 3], 10, 20)], linktype::ETHERNET, false).unwrap();
        assert_eq!(&buf[..4], &[0xd4, 0xc3, 0xb2, 0xa1]);
        let hdr = parse_global_header(&buf).unwrap();
        assert!(!hdr.swapped);
        assert_eq!((hdr.version_major, hdr.version_minor), (2, 4));
        assert_eq!(hdr.network, linktype::ETHERNET);
    }

    #[test]
    fn swapped_magic_byte_swaps_every_field() {
        let mut buf = Vec::new();
        let pkts = [packet(&[9, 8, 7, 6], 0x0102_0304, 999_999)];
        write_pcap(&mut buf, &pkts, linktype::LINUX_SLL, true).unwrap();
        assert_eq!(&buf[..4], &[0xa1, 0xb2, 0xc3, 0xd4]);
        let hdr = parse_global_header(&buf).unwrap();
        assert!(hdr.swapped);
        assert_eq!(hdr.network, linktype::LINUX_SLL);
        let ds = parse_pcap_bytes(&buf, "x").unwrap();
        assert_eq!(ds.packets[0].timestamp.secs, 0x0102_0304);
        assert_eq!(ds.packets[0].timestamp.micros, 999_999);
        assert_eq!(ds.packets[0].bytes, vec![9, 8, 7, 6]);
        assert_eq!(ds.packets[0].orig_len, 8);
    }

    #[test]
    fn bad_magic_is_malformed_header() {
        let mut buf = vec![0u8; 24];
        buf[..4].copy_from_slice(&0xdead_beefu32.to_le_bytes());
        assert!(matches!(
            parse_pcap_bytes(&buf, "x"),
            Err(PcapError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_pcap_bytes(&buf[..10], "x"),
            Err(PcapError::MalformedHeader(_))
        ));
    }

    #[test]
    fn record_longer_than_file_is_truncated() {
        let mut buf = Vec::new();
        write_pcap(&mut buf, &[packet(&[1; 40], 1, 1)], linktype::RAW, false).unwrap();
        buf.truncate(buf.len() - 5);
        match parse_pcap_bytes(&buf, "x") {
            Err(PcapError::TruncatedRecord {
                index,
                claimed,
                remaining,
            }) => {
                assert_eq!((index, claimed, remaining), (0, 40, 35));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_capture_is_empty_dataset() {
        let mut buf = Vec::new();
        write_pcap(&mut buf, &[], linktype::RAW, false).unwrap();
        let ds = parse_pcap_bytes(&buf, "AIM_Chat").unwrap();
        assert!(ds.is_empty());
        assert!(ds.class_names.is_empty());
    }

    #[test]
    fn counts_follow_record_count() {
        let pkts: Vec<_> = (0..1243).map(|i| packet(&[i as u8; 3], i, 0)).collect();
        let mut buf = Vec::new();
        write_pcap(&mut buf, &pkts, linktype::RAW, false).unwrap();
        let ds = parse_pcap_bytes(&buf, "AIM_Chat").unwrap();
        assert_eq!(ds.class_names, vec!["AIM_Chat"]);
        assert_eq!(ds.counts, vec![1243]);
        assert_eq!(ds.packets[42].timestamp.secs, 42);
    }

    #[test]
    fn merge_aggregates_counts() {
        assert!(merge(Vec::new()).is_empty());
        let m = merge([labeled("A", 2), labeled("B", 1), labeled("A", 3)]);
        assert_eq!(m.class_names, vec!["A", "B"]);
        assert_eq!(m.counts, vec![5, 1]);
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn split_pair_is_forced() {
        let ds = labeled("A", 2);
        for seed in 0..10 {
            let s = split(&ds, &SplitSpec::new(0.5, seed).unwrap()).unwrap();
            assert_eq!((s.train.len(), s.test.len()), (1, 1));
        }
    }

    #[test]
    fn split_reports_degenerate_class() {
        let ds = merge([labeled("A", 10), labeled("B", 1)]);
        let s = split(&ds, &SplitSpec::new(0.4, 3).unwrap()).unwrap();
        assert_eq!(s.degenerate_classes, vec!["B"]);
        assert_eq!(s.train.count_of("B"), 1);
        assert_eq!(s.train.count_of("A"), 4);
        assert_eq!(s.test.count_of("A"), 6);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert_eq!(SplitSpec::new(1.0, 0), Err(SplitError::BadFraction(1.0)));
        assert_eq!(SplitSpec::new(0.0, 0), Err(SplitError::BadFraction(0.0)));
        let spec = SplitSpec::new(0.4, 0).unwrap();
        assert_eq!(split(&LabeledDataset::new(), &spec), Err(SplitError::EmptyDataset));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# chat\n/abs/a.pcap, AIM_Chat\n\nrel/b.pcap,Youtube\n";
        let entries = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, PathBuf::from("/abs/a.pcap"));
        assert_eq!(entries[0].label, "AIM_Chat");
        assert_eq!(entries[1].path, PathBuf::from("/data/rel/b.pcap"));
        assert!(matches!(
            parse_manifest("no-comma-here", Path::new(".")),
            Err(PcapError::Manifest { line: 1, .. })
        ));
    }
}
