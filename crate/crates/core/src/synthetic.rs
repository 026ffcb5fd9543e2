//! Synthetic packet corpora with a known, linearly separable signature:
//! every packet of class `c` starts with `prefix_len` copies of one byte
//! value, spread evenly over `0x00..=0xFF` across classes, and the rest of the
//! packet is uniform random noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pcap::{LabeledDataset, RawPacket, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub class_names: Vec<String>,
    pub per_class: usize,
    pub packet_len: usize,
    pub prefix_len: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two classes, `0xFF` versus `0x00` prefixes of 100 bytes on 1500-byte packets.
    pub fn two_class(per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            class_names: vec!["class_a".into(), "class_b".into()],
            per_class,
            packet_len: 1500,
            prefix_len: 100,
            seed,
        }
    }

    pub fn prefix_byte(&self, class: usize) -> u8 {
        let n = self.class_names.len();
        if n < 2 {
            return 0xff;
        }
        (255 - (255 * class) / (n - 1)) as u8
    }

    pub fn class_packets(&self, class: usize) -> Vec<RawPacket> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (class as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let fill = self.prefix_byte(class);
        (0..self.per_class)
            .map(|i| {
                let mut bytes = vec![fill; self.packet_len];
                rng.fill(&mut bytes[self.prefix_len.min(self.packet_len)..]);
                RawPacket {
                    orig_len: bytes.len() as u32,
                    bytes,
                    timestamp: Timestamp {
                        secs: 1_500_000_000 + i as u32,
                        micros: (i as u32 * 7919) % 1_000_000,
                    },
                    link_type: crate::pcap::linktype::RAW,
                    label: Some(self.class_names[class].clone()),
                }
            })
            .collect()
    }

    pub fn generate(&self) -> LabeledDataset {
        LabeledDataset::from_packets((0..self.class_names.len()).flat_map(|c| self.class_packets(c)))
    }
}
