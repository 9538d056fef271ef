//! Synthetic labeled DEX/XML sample pairs with plantable class signal,
//! obfuscation-style transforms, and a drift knob.
//!
//! Class signal lives in the index sections only: method_ids and class_defs
//! entries carry byte motifs drawn from per-class pools, and the manifest
//! text carries permission-like lines with a suspicious pool for the
//! malicious class. The data section is pure noise. Drift shifts the motif
//! byte values without touching any other randomness, so corpora that differ
//! only in `t` differ only in motif bytes.

use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dex::{dex_checksum, DexError, DexHeader, SectionKind, HEADER_SIZE};
use crate::imaging::{self, ImageError, ImageFormat, ImageGeometry, RgbImage};

/// Byte-value pools for the planted motifs. Disjoint contiguous ranges so
/// drift (an additive shift) moves the histograms apart monotonically.
const BENIGN_MOTIF_BASE: u8 = 0x30;
const MALICIOUS_MOTIF_BASE: u8 = 0xB0;
const MOTIF_POOL_WIDTH: u8 = 8;
const DRIFT_BYTE_SCALE: f64 = 4.0;

/// Malicious population mix. Category A carries the primary DEX motifs
/// (and often suspicious manifest content), category B is detectable only
/// through the manifest, and category C carries a *matched* cross-modal
/// marker pair whose per-modality marginals are identical across classes,
/// so only the pairing itself is informative.
const MAL_PRIMARY_DEX: f64 = 0.86; // A
const MAL_XML_ONLY: f64 = 0.92; // A + B; remainder is C
const XML_IN_PRIMARY: f64 = 0.63; // P(suspicious manifest | A)
/// Benign samples carry a *mismatched* marker pair at the same rate C
/// occurs, keeping each marker family equally common in both classes.
const BENIGN_PAIR: f64 = 0.08;
/// Benign manifests occasionally request one suspicious permission.
const BENIGN_XML_NOISE: f64 = 0.05;

/// Cross-modal marker families: byte pools planted in field_ids paired with
/// hardware-feature lines in the manifest.
const MARKER_FAMILIES: usize = 4;
const MARKER_DEX_BASE: u8 = 0x60;
const MARKER_FEATURES: [&str; MARKER_FAMILIES] = [
    "android.hardware.camera",
    "android.hardware.telephony",
    "android.hardware.bluetooth",
    "android.hardware.nfc",
];

const MAX_SECTION_ENTRIES: u32 = 65_535;
const MAX_INDEX_BYTES: u64 = 1 << 20;

const COMMON_PERMISSIONS: [&str; 16] = [
    "android.permission.INTERNET",
    "android.permission.ACCESS_NETWORK_STATE",
    "android.permission.ACCESS_WIFI_STATE",
    "android.permission.WAKE_LOCK",
    "android.permission.VIBRATE",
    "android.permission.CAMERA",
    "android.permission.BLUETOOTH",
    "android.permission.NFC",
    "android.permission.FOREGROUND_SERVICE",
    "android.permission.POST_NOTIFICATIONS",
    "android.permission.READ_MEDIA_IMAGES",
    "android.permission.RECORD_AUDIO",
    "android.permission.ACCESS_COARSE_LOCATION",
    "android.permission.ACCESS_FINE_LOCATION",
    "android.permission.READ_EXTERNAL_STORAGE",
    "android.permission.WRITE_EXTERNAL_STORAGE",
];

const SUSPICIOUS_PERMISSIONS: [&str; 10] = [
    "android.permission.SEND_SMS",
    "android.permission.READ_SMS",
    "android.permission.RECEIVE_SMS",
    "android.permission.READ_CONTACTS",
    "android.permission.READ_CALL_LOG",
    "android.permission.PROCESS_OUTGOING_CALLS",
    "android.permission.RECEIVE_BOOT_COMPLETED",
    "android.permission.SYSTEM_ALERT_WINDOW",
    "android.permission.REQUEST_INSTALL_PACKAGES",
    "android.permission.BIND_DEVICE_ADMIN",
];

const SUSPICIOUS_ACTIONS: [&str; 4] = [
    "android.intent.action.BOOT_COMPLETED",
    "android.provider.Telephony.SMS_RECEIVED",
    "android.intent.action.NEW_OUTGOING_CALL",
    "android.app.action.DEVICE_ADMIN_ENABLED",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("sample spec overflow: {0}")]
    SpecOverflow(String),
    #[error(transparent)]
    Dex(#[from] DexError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    /// Class index for the two-way heads: benign 0, malicious 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malicious => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Benign => write!(f, "benign"),
            Label::Malicious => write!(f, "malicious"),
        }
    }
}

/// Entry counts for the six index tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SectionCounts {
    pub string_ids: u32,
    pub type_ids: u32,
    pub proto_ids: u32,
    pub field_ids: u32,
    pub method_ids: u32,
    pub class_defs: u32,
}

impl SectionCounts {
    pub const fn zero() -> Self {
        SectionCounts {
            string_ids: 0,
            type_ids: 0,
            proto_ids: 0,
            field_ids: 0,
            method_ids: 0,
            class_defs: 0,
        }
    }

    /// Defaults sized so a 64x64 image is mostly filled without truncation.
    pub const fn desk_default() -> Self {
        SectionCounts {
            string_ids: 128,
            type_ids: 96,
            proto_ids: 64,
            field_ids: 128,
            method_ids: 384,
            class_defs: 96,
        }
    }

    pub fn get(&self, kind: SectionKind) -> u32 {
        match kind {
            SectionKind::StringIds => self.string_ids,
            SectionKind::TypeIds => self.type_ids,
            SectionKind::ProtoIds => self.proto_ids,
            SectionKind::FieldIds => self.field_ids,
            SectionKind::MethodIds => self.method_ids,
            SectionKind::ClassDefs => self.class_defs,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        SectionKind::ALL
            .iter()
            .map(|&k| self.get(k) as u64 * k.entry_width() as u64)
            .sum()
    }

    /// Uniformly rescale all counts (floor 1 per table).
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |c: u32| ((c as f64 * factor).round() as u32).max(1);
        SectionCounts {
            string_ids: s(self.string_ids),
            type_ids: s(self.type_ids),
            proto_ids: s(self.proto_ids),
            field_ids: s(self.field_ids),
            method_ids: s(self.method_ids),
            class_defs: s(self.class_defs),
        }
    }
}

/// Everything that determines one sample, bit for bit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleSpec {
    pub label: Label,
    pub seed: u64,
    pub counts: SectionCounts,
    /// Motif strength p: probability that a carrier entry or permission line
    /// actually carries the class signal.
    pub motif_strength: f64,
    /// Drift parameter t: shifts motif byte values and rotates the
    /// suspicious-permission pool.
    pub drift: f64,
}

impl SampleSpec {
    pub fn default_benign(seed: u64) -> Self {
        SampleSpec {
            label: Label::Benign,
            seed,
            counts: SectionCounts::desk_default(),
            motif_strength: 0.8,
            drift: 0.0,
        }
    }

    pub fn default_malicious(seed: u64) -> Self {
        SampleSpec {
            label: Label::Malicious,
            ..SampleSpec::default_benign(seed)
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for kind in SectionKind::ALL {
            if self.counts.get(kind) > MAX_SECTION_ENTRIES {
                return Err(CorpusError::SpecOverflow(format!(
                    "{kind:?} count {} exceeds {MAX_SECTION_ENTRIES}",
                    self.counts.get(kind)
                )));
            }
        }
        if self.counts.total_bytes() > MAX_INDEX_BYTES {
            return Err(CorpusError::SpecOverflow(format!(
                "total index bytes {} exceed {MAX_INDEX_BYTES}",
                self.counts.total_bytes()
            )));
        }
        if !self.motif_strength.is_finite() || !(0.0..=1.0).contains(&self.motif_strength) {
            return Err(CorpusError::SpecOverflow(format!(
                "motif strength {} outside [0, 1]",
                self.motif_strength
            )));
        }
        if !self.drift.is_finite() || self.drift < 0.0 {
            return Err(CorpusError::SpecOverflow(format!(
                "drift {} must be finite and non-negative",
                self.drift
            )));
        }
        Ok(())
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Which signals one sample carries. Derived from the spec alone so the DEX
/// and XML builders agree; exactly four uniform draws are consumed on every
/// path, keeping downstream randomness aligned across labels and categories.
#[derive(Debug, Clone, Copy)]
struct SignalFlags {
    dex_pool_base: u8,
    xml_suspicious: bool,
    /// (DEX marker family, manifest marker family); matched for malicious
    /// category C, mismatched for marked benign samples.
    marker: Option<(usize, usize)>,
}

fn signal_flags(spec: &SampleSpec) -> SignalFlags {
    let mut rng = stream_rng(spec.seed, 0);
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let u4: f64 = rng.gen();
    let family = |u: f64| ((u * MARKER_FAMILIES as f64) as usize).min(MARKER_FAMILIES - 1);
    match spec.label {
        Label::Benign => SignalFlags {
            dex_pool_base: BENIGN_MOTIF_BASE,
            xml_suspicious: u2 < BENIGN_XML_NOISE,
            marker: (u1 < BENIGN_PAIR).then(|| {
                let f = family(u3);
                let offset = 1 + ((u4 * (MARKER_FAMILIES - 1) as f64) as usize)
                    .min(MARKER_FAMILIES - 2);
                (f, (f + offset) % MARKER_FAMILIES)
            }),
        },
        Label::Malicious => {
            if u1 < MAL_PRIMARY_DEX {
                SignalFlags {
                    dex_pool_base: MALICIOUS_MOTIF_BASE,
                    xml_suspicious: u2 < XML_IN_PRIMARY,
                    marker: None,
                }
            } else if u1 < MAL_XML_ONLY {
                SignalFlags {
                    dex_pool_base: BENIGN_MOTIF_BASE,
                    xml_suspicious: true,
                    marker: None,
                }
            } else {
                let f = family(u3);
                SignalFlags {
                    dex_pool_base: BENIGN_MOTIF_BASE,
                    xml_suspicious: false,
                    marker: Some((f, f)),
                }
            }
        }
    }
}

fn drifted(base: u8, offset: u8, t: f64) -> u8 {
    let shift = (DRIFT_BYTE_SCALE * t).floor() as i64;
    (base as i64 + offset as i64 + shift).rem_euclid(256) as u8
}

/// What the builder wrote, for round-trip oracles.
#[derive(Debug, Clone)]
pub struct DexBuildRecord {
    pub header: DexHeader,
    pub index_bytes: Vec<u8>,
}

/// Per-section raw bytes plus the data blob; the normalized form used by the
/// builder and the obfuscation transforms.
#[derive(Debug, Clone)]
struct SectionBytes {
    sections: [Vec<u8>; 6],
    data: Vec<u8>,
}

impl SectionBytes {
    fn section_mut(&mut self, kind: SectionKind) -> &mut Vec<u8> {
        &mut self.sections[SectionKind::ALL.iter().position(|&k| k == kind).unwrap()]
    }
}

/// Lay the sections out sequentially after the header and synthesize a
/// consistent header (checksum included, signature zeroed).
fn assemble(parts: &SectionBytes) -> (Vec<u8>, DexHeader) {
    let mut offsets = [0u32; 6];
    let mut at = HEADER_SIZE as u32;
    for (i, kind) in SectionKind::ALL.iter().enumerate() {
        debug_assert_eq!(parts.sections[i].len() % kind.entry_width() as usize, 0);
        if !parts.sections[i].is_empty() {
            offsets[i] = at;
            at += parts.sections[i].len() as u32;
        }
    }
    let data_off = if parts.data.is_empty() { 0 } else { at };
    let file_size = at + parts.data.len() as u32;

    let counts: Vec<u32> = SectionKind::ALL
        .iter()
        .enumerate()
        .map(|(i, kind)| (parts.sections[i].len() / kind.entry_width() as usize) as u32)
        .collect();

    let mut header = DexHeader {
        magic: *b"dex\n035\0",
        checksum: 0,
        signature: [0u8; 20],
        file_size,
        header_size: HEADER_SIZE as u32,
        endian_tag: crate::dex::ENDIAN_CONSTANT,
        link_size: 0,
        link_off: 0,
        map_off: data_off,
        string_ids_size: counts[0],
        string_ids_off: offsets[0],
        type_ids_size: counts[1],
        type_ids_off: offsets[1],
        proto_ids_size: counts[2],
        proto_ids_off: offsets[2],
        field_ids_size: counts[3],
        field_ids_off: offsets[3],
        method_ids_size: counts[4],
        method_ids_off: offsets[4],
        class_defs_size: counts[5],
        class_defs_off: offsets[5],
        data_size: parts.data.len() as u32,
        data_off,
    };

    let mut raw = Vec::with_capacity(file_size as usize);
    raw.extend_from_slice(&header.magic);
    raw.extend_from_slice(&0u32.to_le_bytes());
    raw.extend_from_slice(&header.signature);
    for v in [
        header.file_size,
        header.header_size,
        header.endian_tag,
        header.link_size,
        header.link_off,
        header.map_off,
        header.string_ids_size,
        header.string_ids_off,
        header.type_ids_size,
        header.type_ids_off,
        header.proto_ids_size,
        header.proto_ids_off,
        header.field_ids_size,
        header.field_ids_off,
        header.method_ids_size,
        header.method_ids_off,
        header.class_defs_size,
        header.class_defs_off,
        header.data_size,
        header.data_off,
    ] {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(raw.len(), HEADER_SIZE);
    for section in &parts.sections {
        raw.extend_from_slice(section);
    }
    raw.extend_from_slice(&parts.data);

    let checksum = dex_checksum(&raw);
    raw[8..12].copy_from_slice(&checksum.to_le_bytes());
    header.checksum = checksum;
    (raw, header)
}

fn build_sections(spec: &SampleSpec) -> SectionBytes {
    let flags = signal_flags(spec);
    let mut rng = stream_rng(spec.seed, 1);
    let mut sections: [Vec<u8>; 6] = Default::default();

    for (i, kind) in SectionKind::ALL.iter().enumerate() {
        let count = spec.counts.get(*kind) as usize;
        let width = kind.entry_width() as usize;
        let mut bytes = Vec::with_capacity(count * width);
        // The class pools go into the method/class tables; the cross-modal
        // marker pool goes into the field table.
        let pool_base = match kind {
            SectionKind::MethodIds | SectionKind::ClassDefs => Some(flags.dex_pool_base),
            SectionKind::FieldIds => flags
                .marker
                .map(|(dex_family, _)| MARKER_DEX_BASE + MOTIF_POOL_WIDTH * dex_family as u8),
            _ => None,
        };
        for _ in 0..count {
            // Every entry consumes one roll plus `width` byte draws whether
            // or not it carries a motif, so neither drift nor the signal
            // category changes how much randomness is consumed.
            let motif = rng.gen::<f64>() < spec.motif_strength;
            for _ in 0..width {
                let roll = rng.gen::<u8>();
                match pool_base {
                    Some(base) if motif => {
                        bytes.push(drifted(base, roll % MOTIF_POOL_WIDTH, spec.drift))
                    }
                    _ => bytes.push(roll),
                }
            }
        }
        sections[i] = bytes;
    }

    let data = if spec.counts.total_bytes() == 0 {
        Vec::new()
    } else {
        let len = 256 + (rng.gen::<u32>() % 256) as usize;
        (0..len).map(|_| rng.gen::<u8>()).collect()
    };
    SectionBytes { sections, data }
}

/// Build a parseable DEX byte stream along with the header and index bytes
/// the builder intended, for round-trip checks.
pub fn build_synthetic_dex_with_record(
    spec: &SampleSpec,
) -> Result<(Vec<u8>, DexBuildRecord), CorpusError> {
    spec.validate()?;
    let parts = build_sections(spec);
    let (raw, header) = assemble(&parts);
    let index_bytes = parts.sections.concat();
    Ok((raw, DexBuildRecord { header, index_bytes }))
}

pub fn build_synthetic_dex(spec: &SampleSpec) -> Result<Vec<u8>, CorpusError> {
    build_synthetic_dex_with_record(spec).map(|(raw, _)| raw)
}

/// Text manifest with permission-like lines. Malicious specs draw extra
/// lines from the suspicious pool with probability `motif_strength` each.
pub fn build_synthetic_xml(spec: &SampleSpec) -> Result<Vec<u8>, CorpusError> {
    spec.validate()?;
    let flags = signal_flags(spec);
    let mut rng = stream_rng(spec.seed, 2);

    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n");
    out.push_str(&format!(
        "<manifest xmlns:android=\"http://schemas.android.com/apk/res/android\" package=\"com.sample.a{:08x}\">\n",
        rng.gen::<u32>()
    ));
    out.push_str(&format!(
        "  <uses-sdk android:minSdkVersion=\"{}\" android:targetSdkVersion=\"33\"/>\n",
        21 + (2.0 * spec.drift).floor() as i64
    ));

    let n_common = 6 + (rng.gen::<u32>() % 8) as usize;
    for _ in 0..n_common {
        let p = COMMON_PERMISSIONS[rng.gen::<u32>() as usize % COMMON_PERMISSIONS.len()];
        out.push_str(&format!("  <uses-permission android:name=\"{p}\"/>\n"));
    }

    if let Some((_, xml_family)) = flags.marker {
        let feature = MARKER_FEATURES[xml_family];
        for _ in 0..3 {
            out.push_str(&format!(
                "  <uses-feature android:name=\"{feature}\" android:required=\"true\"/>\n"
            ));
        }
    }

    let mut component_block = String::new();
    if flags.xml_suspicious {
        let rotation = spec.drift.floor() as usize;
        match spec.label {
            Label::Malicious => {
                // Extra permission lines, each drawn with probability p.
                let n_candidates = 2 + (rng.gen::<u32>() % 3) as usize;
                for _ in 0..n_candidates {
                    let keep = rng.gen::<f64>() < spec.motif_strength;
                    let idx =
                        (rng.gen::<u32>() as usize + rotation) % SUSPICIOUS_PERMISSIONS.len();
                    if keep {
                        let p = SUSPICIOUS_PERMISSIONS[idx];
                        out.push_str(&format!("  <uses-permission android:name=\"{p}\"/>\n"));
                    }
                }
                // Plus the kind of component wiring that rides along with
                // those permissions.
                let action = SUSPICIOUS_ACTIONS
                    [(rng.gen::<u32>() as usize + rotation) % SUSPICIOUS_ACTIONS.len()];
                component_block = format!(
                    "    <receiver android:name=\".SysReceiver{}\" android:exported=\"true\">\n      <intent-filter android:priority=\"999\">\n        <action android:name=\"{action}\"/>\n      </intent-filter>\n    </receiver>\n",
                    rng.gen::<u32>() % 100
                );
            }
            Label::Benign => {
                // Occasional benign app that requests one touchy permission.
                let idx = (rng.gen::<u32>() as usize + rotation) % SUSPICIOUS_PERMISSIONS.len();
                let p = SUSPICIOUS_PERMISSIONS[idx];
                out.push_str(&format!("  <uses-permission android:name=\"{p}\"/>\n"));
            }
        }
    }

    out.push_str("  <application android:label=\"app\">\n");
    out.push_str(&format!(
        "    <activity android:name=\".Main{}\"/>\n",
        rng.gen::<u32>() % 100
    ));
    out.push_str(&component_block);
    out.push_str("  </application>\n</manifest>\n");
    Ok(out.into_bytes())
}

// ----- obfuscation transforms -----

/// Semantics-preserving byte-level analogs of common obfuscators: each one
/// perturbs the image statistic its real counterpart would (junk dilutes,
/// renaming scrambles identifier tables, encryption shifts string bytes,
/// realignment shifts content positions).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObfuscationTransform {
    JunkInsertion { rate: f64 },
    IdentifierRandomization { seed: u64 },
    StringEncryptionSim { key: u8 },
    Realignment { pad: u32 },
}

impl fmt::Display for ObfuscationTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObfuscationTransform::JunkInsertion { rate } => write!(f, "junk:{rate}"),
            ObfuscationTransform::IdentifierRandomization { seed } => write!(f, "rename:{seed}"),
            ObfuscationTransform::StringEncryptionSim { key } => write!(f, "encrypt:{key}"),
            ObfuscationTransform::Realignment { pad } => write!(f, "realign:{pad}"),
        }
    }
}

impl FromStr for ObfuscationTransform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| format!("transform `{s}` must look like name:value"))?;
        let bad = |e: &dyn fmt::Display| format!("transform `{s}`: {e}");
        match name {
            "junk" => Ok(ObfuscationTransform::JunkInsertion {
                rate: arg.parse().map_err(|e| bad(&e))?,
            }),
            "rename" => Ok(ObfuscationTransform::IdentifierRandomization {
                seed: arg.parse().map_err(|e| bad(&e))?,
            }),
            "encrypt" => Ok(ObfuscationTransform::StringEncryptionSim {
                key: arg.parse().map_err(|e| bad(&e))?,
            }),
            "realign" => Ok(ObfuscationTransform::Realignment {
                pad: arg.parse().map_err(|e| bad(&e))?,
            }),
            other => Err(format!(
                "unknown transform `{other}` (expected junk, rename, encrypt, realign)"
            )),
        }
    }
}

/// Parse a comma-separated transform list, e.g. `junk:0.4,encrypt:171`.
pub fn parse_transforms(s: &str) -> Result<Vec<ObfuscationTransform>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse())
        .collect()
}

fn dissect(raw: &[u8]) -> Result<SectionBytes, CorpusError> {
    let header = DexHeader::parse(raw)?;
    let mut sections: [Vec<u8>; 6] = Default::default();
    for span in header.index_spans() {
        let i = SectionKind::ALL.iter().position(|&k| k == span.section).unwrap();
        sections[i] = raw[span.offset as usize..(span.offset + span.length) as usize].to_vec();
    }
    let data = raw[header.data_off as usize..(header.data_off + header.data_size) as usize].to_vec();
    Ok(SectionBytes { sections, data })
}

fn apply_transform(parts: &mut SectionBytes, transform: &ObfuscationTransform) {
    match transform {
        ObfuscationTransform::JunkInsertion { rate } => {
            for (i, kind) in SectionKind::ALL.iter().enumerate() {
                let width = kind.entry_width() as usize;
                let n = parts.sections[i].len() / width;
                if n == 0 {
                    continue;
                }
                let n_junk = ((n as f64 * rate).ceil() as usize).max(if *rate > 0.0 { 1 } else { 0 });
                if n_junk == 0 {
                    continue;
                }
                let mut rng = stream_rng(0x6A75_6E6B, i as u64 ^ (n as u64) << 8);
                let old = std::mem::take(&mut parts.sections[i]);
                let mut out = Vec::with_capacity(old.len() + n_junk * width);
                // Spread junk entries evenly through the section.
                let step = (n / n_junk).max(1);
                let mut inserted = 0;
                for (e, entry) in old.chunks(width).enumerate() {
                    if inserted < n_junk && e % step == 0 {
                        for _ in 0..width {
                            out.push(rng.gen::<u8>());
                        }
                        inserted += 1;
                    }
                    out.extend_from_slice(entry);
                }
                while inserted < n_junk {
                    for _ in 0..width {
                        out.push(rng.gen::<u8>());
                    }
                    inserted += 1;
                }
                parts.sections[i] = out;
            }
        }
        ObfuscationTransform::IdentifierRandomization { seed } => {
            let mut rng = stream_rng(*seed, 0x7265_6E61);
            for kind in [SectionKind::StringIds, SectionKind::TypeIds] {
                for b in parts.section_mut(kind).iter_mut() {
                    *b = rng.gen::<u8>();
                }
            }
        }
        ObfuscationTransform::StringEncryptionSim { key } => {
            for b in parts.section_mut(SectionKind::StringIds).iter_mut() {
                *b ^= key;
            }
            // Half of the method table entries get "encrypted" too.
            let width = SectionKind::MethodIds.entry_width() as usize;
            for (e, entry) in parts
                .section_mut(SectionKind::MethodIds)
                .chunks_mut(width)
                .enumerate()
            {
                if e % 2 == 1 {
                    for b in entry {
                        *b ^= key;
                    }
                }
            }
        }
        ObfuscationTransform::Realignment { pad } => {
            for (i, kind) in SectionKind::ALL.iter().enumerate() {
                if parts.sections[i].is_empty() {
                    continue;
                }
                let width = kind.entry_width() as usize;
                let n_entries = (*pad as usize).div_ceil(width);
                let mut out = vec![0u8; n_entries * width];
                out.extend_from_slice(&parts.sections[i]);
                parts.sections[i] = out;
            }
        }
    }
}

/// Apply the transforms in order and re-synthesize a valid DEX stream.
pub fn obfuscate(
    raw: &[u8],
    transforms: &[ObfuscationTransform],
) -> Result<Vec<u8>, CorpusError> {
    let mut parts = dissect(raw)?;
    for t in transforms {
        apply_transform(&mut parts, t);
    }
    Ok(assemble(&parts).0)
}

// ----- corpus generation -----

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CorpusParams {
    pub n: usize,
    /// Fraction of samples labeled malicious.
    pub malicious_fraction: f64,
    pub motif_strength: f64,
    pub drift: f64,
    pub transforms: Vec<ObfuscationTransform>,
    pub seed: u64,
    pub geometry: ImageGeometry,
    pub counts: SectionCounts,
}

impl CorpusParams {
    pub fn desk_default(n: usize, seed: u64) -> Self {
        CorpusParams {
            n,
            malicious_fraction: 0.5,
            motif_strength: 0.8,
            drift: 0.0,
            transforms: Vec::new(),
            seed,
            geometry: ImageGeometry::new(64, 64).expect("static geometry"),
            counts: SectionCounts::desk_default(),
        }
    }
}

/// An in-memory sample: raw streams plus their images.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub id: String,
    pub spec: SampleSpec,
    pub dex: Vec<u8>,
    pub xml: Vec<u8>,
    pub dex_img: RgbImage,
    pub xml_img: RgbImage,
}

impl GeneratedSample {
    pub fn label(&self) -> Label {
        self.spec.label
    }

    pub fn to_loaded(&self) -> LoadedSample {
        LoadedSample {
            id: self.id.clone(),
            label: self.spec.label,
            dex_img: self.dex_img.clone(),
            xml_img: self.xml_img.clone(),
        }
    }
}

/// A sample as the trainer consumes it.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub label: Label,
    pub dex_img: RgbImage,
    pub xml_img: RgbImage,
}

fn sample_label(params: &CorpusParams, i: usize) -> Label {
    // Interleave labels so any prefix stays close to the requested mix.
    let before = (i as f64 * params.malicious_fraction).floor();
    let after = ((i + 1) as f64 * params.malicious_fraction).floor();
    if after > before {
        Label::Malicious
    } else {
        Label::Benign
    }
}

pub fn generate_sample(params: &CorpusParams, i: usize) -> Result<GeneratedSample, CorpusError> {
    let child_seed = splitmix64(params.seed ^ splitmix64(i as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(child_seed ^ 0xC0FF_EE00));
    let size_jitter = 0.75 + 0.35 * rng.gen::<f64>();
    let spec = SampleSpec {
        label: sample_label(params, i),
        seed: child_seed,
        counts: params.counts.scaled(size_jitter),
        motif_strength: params.motif_strength,
        drift: params.drift,
    };
    let mut dex = build_synthetic_dex(&spec)?;
    if !params.transforms.is_empty() {
        dex = obfuscate(&dex, &params.transforms)?;
    }
    let xml = build_synthetic_xml(&spec)?;

    let header = DexHeader::parse(&dex)?;
    let index = crate::dex::extract_index_bytes(&dex, &header)?;
    let dex_img = imaging::pack_rgb(&index.bytes, params.geometry);
    let xml_img = imaging::xml_to_image(&xml, params.geometry);

    Ok(GeneratedSample {
        id: format!("s{i:05}"),
        spec,
        dex,
        xml,
        dex_img,
        xml_img,
    })
}

/// Generate the whole corpus in memory, in id order.
pub fn generate_corpus_in_memory(
    params: &CorpusParams,
) -> Result<Vec<GeneratedSample>, CorpusError> {
    (0..params.n).map(|i| generate_sample(params, i)).collect()
}

/// Per-sample manifest record; paths are relative to the corpus directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: Label,
    pub dex: String,
    pub xml: String,
    pub dex_img: String,
    pub xml_img: String,
    pub transforms: Vec<ObfuscationTransform>,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub dir: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.jsonl")
    }

    pub fn load(dir: &Path) -> Result<CorpusManifest, CorpusError> {
        let file = fs::File::open(Self::manifest_path(dir))?;
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line).map_err(|e| {
                CorpusError::Manifest(format!("line {}: {e}", lineno + 1))
            })?;
            records.push(record);
        }
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.clone()) {
                return Err(CorpusError::Manifest(format!("duplicate id {}", r.id)));
            }
        }
        Ok(CorpusManifest {
            dir: dir.to_path_buf(),
            records,
        })
    }
}

/// Write a corpus to disk: `{dex,xml,img}/<id>.*`, a JSON-lines manifest, and
/// the generation parameters next to it.
pub fn gen_corpus(params: &CorpusParams, out_dir: &Path) -> Result<CorpusManifest, CorpusError> {
    write_corpus_samples(params, out_dir, &generate_corpus_in_memory(params)?)
}

/// Write pre-generated samples (lets callers parallelize generation).
pub fn write_corpus_samples(
    params: &CorpusParams,
    out_dir: &Path,
    samples: &[GeneratedSample],
) -> Result<CorpusManifest, CorpusError> {
    for sub in ["dex", "xml", "img"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut manifest = fs::File::create(CorpusManifest::manifest_path(out_dir))?;
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let record = SampleRecord {
            id: sample.id.clone(),
            label: sample.spec.label,
            dex: format!("dex/{}.dex", sample.id),
            xml: format!("xml/{}.xml", sample.id),
            dex_img: format!("img/{}_dex.png", sample.id),
            xml_img: format!("img/{}_xml.png", sample.id),
            transforms: params.transforms.clone(),
            t: sample.spec.drift,
        };
        fs::write(out_dir.join(&record.dex), &sample.dex)?;
        fs::write(out_dir.join(&record.xml), &sample.xml)?;
        fs::write(
            out_dir.join(&record.dex_img),
            imaging::encode_image(&sample.dex_img, ImageFormat::LosslessPng)?,
        )?;
        fs::write(
            out_dir.join(&record.xml_img),
            imaging::encode_image(&sample.xml_img, ImageFormat::LosslessPng)?,
        )?;
        writeln!(manifest, "{}", serde_json::to_string(&record).unwrap())?;
        records.push(record);
    }
    fs::write(
        out_dir.join("corpus.json"),
        serde_json::to_string_pretty(params).unwrap(),
    )?;
    Ok(CorpusManifest {
        dir: out_dir.to_path_buf(),
        records,
    })
}

/// Load sample images from a corpus directory, optionally obfuscating the
/// DEX streams first (the manifest images are left untouched; the DEX is
/// re-imaged from the transformed bytes).
pub fn load_samples_with_transforms(
    manifest: &CorpusManifest,
    transforms: &[ObfuscationTransform],
) -> Result<Vec<LoadedSample>, CorpusError> {
    manifest
        .records
        .iter()
        .map(|record| {
            let xml_img = imaging::decode_image(&fs::read(manifest.dir.join(&record.xml_img))?)?;
            let dex_img = if transforms.is_empty() {
                imaging::decode_image(&fs::read(manifest.dir.join(&record.dex_img))?)?
            } else {
                let raw = fs::read(manifest.dir.join(&record.dex))?;
                let obf = obfuscate(&raw, transforms)?;
                let header = DexHeader::parse(&obf)?;
                let index = crate::dex::extract_index_bytes(&obf, &header)?;
                imaging::pack_rgb(&index.bytes, xml_img.geometry)
            };
            Ok(LoadedSample {
                id: record.id.clone(),
                label: record.label,
                dex_img,
                xml_img,
            })
        })
        .collect()
}

pub fn load_samples(manifest: &CorpusManifest) -> Result<Vec<LoadedSample>, CorpusError> {
    load_samples_with_transforms(manifest, &[])
}
