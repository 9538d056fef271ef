//! DEX container parsing: header decoding, index-section layout, and
//! extraction of the concatenated index bytes that get imaged.
//!
//! A DEX file splits into header, index, and data sections. Only the six
//! index tables (string_ids .. class_defs) are kept; header and data are
//! discarded before imaging.

use thiserror::Error;

/// Fixed DEX header size in bytes.
pub const HEADER_SIZE: usize = 112;

/// Leading magic bytes: `dex\n`.
pub const DEX_MAGIC_PREFIX: [u8; 4] = [0x64, 0x65, 0x78, 0x0a];

/// Standard little-endian tag. The reverse-endian constant is rejected.
pub const ENDIAN_CONSTANT: u32 = 0x1234_5678;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DexError {
    #[error("input too short: {len} bytes, header needs {HEADER_SIZE}")]
    TooShort { len: usize },
    #[error("bad magic: first four bytes are not `dex\\n`")]
    BadMagic,
    #[error("header_size is {0}, expected {HEADER_SIZE}")]
    BadHeaderSize(u32),
    #[error("endian_tag {0:#010x} is not the little-endian constant")]
    BadEndianTag(u32),
    #[error("file_size field is {field} but the input holds {actual} bytes")]
    FileSizeMismatch { field: u32, actual: usize },
    #[error("section {section:?} at offset {offset} with {length} bytes exceeds file size {file_size}")]
    OutOfBounds {
        section: SectionKind,
        offset: u32,
        length: u32,
        file_size: u32,
    },
    #[error("section {a:?} overlaps {b:?}")]
    Overlap { a: SectionKind, b: SectionKind },
    #[error("checksum mismatch: header says {expected:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { expected: u32, computed: u32 },
}

/// The six index tables, in header order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum SectionKind {
    StringIds,
    TypeIds,
    ProtoIds,
    FieldIds,
    MethodIds,
    ClassDefs,
}

impl SectionKind {
    pub const ALL: [SectionKind; 6] = [
        SectionKind::StringIds,
        SectionKind::TypeIds,
        SectionKind::ProtoIds,
        SectionKind::FieldIds,
        SectionKind::MethodIds,
        SectionKind::ClassDefs,
    ];

    /// Fixed on-disk width of one entry, in bytes.
    pub fn entry_width(self) -> u32 {
        match self {
            SectionKind::StringIds | SectionKind::TypeIds => 4,
            SectionKind::ProtoIds => 12,
            SectionKind::FieldIds | SectionKind::MethodIds => 8,
            SectionKind::ClassDefs => 32,
        }
    }
}

/// Decoded DEX header. Field order matches the on-disk layout; everything is
/// little-endian.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DexHeader {
    pub magic: [u8; 8],
    pub checksum: u32,
    #[serde(serialize_with = "hex_signature")]
    pub signature: [u8; 20],
    pub file_size: u32,
    pub header_size: u32,
    pub endian_tag: u32,
    pub link_size: u32,
    pub link_off: u32,
    pub map_off: u32,
    pub string_ids_size: u32,
    pub string_ids_off: u32,
    pub type_ids_size: u32,
    pub type_ids_off: u32,
    pub proto_ids_size: u32,
    pub proto_ids_off: u32,
    pub field_ids_size: u32,
    pub field_ids_off: u32,
    pub method_ids_size: u32,
    pub method_ids_off: u32,
    pub class_defs_size: u32,
    pub class_defs_off: u32,
    pub data_size: u32,
    pub data_off: u32,
}

fn hex_signature<S: serde::Serializer>(sig: &[u8; 20], s: S) -> Result<S::Ok, S::Error> {
    let hex: String = sig.iter().map(|b| format!("{b:02x}")).collect();
    s.serialize_str(&hex)
}

/// One index table's position in the file. `length` is already in bytes
/// (entry count times entry width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct IndexSpan {
    pub section: SectionKind,
    pub offset: u32,
    pub length: u32,
}

/// The concatenated index-section bytes in file-offset order, plus the spans
/// they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexBytes {
    pub bytes: Vec<u8>,
    pub spans: Vec<IndexSpan>,
}

fn read_u32(raw: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([raw[at], raw[at + 1], raw[at + 2], raw[at + 3]])
}

impl DexHeader {
    /// Decode and validate a header from the start of `raw`.
    ///
    /// Checksum and signature are decoded but not verified here; use
    /// [`verify_checksum`] for the strict path.
    pub fn parse(raw: &[u8]) -> Result<DexHeader, DexError> {
        if raw.len() < HEADER_SIZE {
            return Err(DexError::TooShort { len: raw.len() });
        }
        if raw[..4] != DEX_MAGIC_PREFIX {
            return Err(DexError::BadMagic);
        }
        let mut magic = [0u8; 8];
        magic.copy_from_slice(&raw[..8]);
        let mut signature = [0u8; 20];
        signature.copy_from_slice(&raw[12..32]);

        let header = DexHeader {
            magic,
            checksum: read_u32(raw, 8),
            signature,
            file_size: read_u32(raw, 32),
            header_size: read_u32(raw, 36),
            endian_tag: read_u32(raw, 40),
            link_size: read_u32(raw, 44),
            link_off: read_u32(raw, 48),
            map_off: read_u32(raw, 52),
            string_ids_size: read_u32(raw, 56),
            string_ids_off: read_u32(raw, 60),
            type_ids_size: read_u32(raw, 64),
            type_ids_off: read_u32(raw, 68),
            proto_ids_size: read_u32(raw, 72),
            proto_ids_off: read_u32(raw, 76),
            field_ids_size: read_u32(raw, 80),
            field_ids_off: read_u32(raw, 84),
            method_ids_size: read_u32(raw, 88),
            method_ids_off: read_u32(raw, 92),
            class_defs_size: read_u32(raw, 96),
            class_defs_off: read_u32(raw, 100),
            data_size: read_u32(raw, 104),
            data_off: read_u32(raw, 108),
        };
        header.validate(raw.len())?;
        Ok(header)
    }

    fn section_raw(&self, kind: SectionKind) -> (u32, u32) {
        match kind {
            SectionKind::StringIds => (self.string_ids_size, self.string_ids_off),
            SectionKind::TypeIds => (self.type_ids_size, self.type_ids_off),
            SectionKind::ProtoIds => (self.proto_ids_size, self.proto_ids_off),
            SectionKind::FieldIds => (self.field_ids_size, self.field_ids_off),
            SectionKind::MethodIds => (self.method_ids_size, self.method_ids_off),
            SectionKind::ClassDefs => (self.class_defs_size, self.class_defs_off),
        }
    }

    fn validate(&self, actual_len: usize) -> Result<(), DexError> {
        if self.header_size != HEADER_SIZE as u32 {
            return Err(DexError::BadHeaderSize(self.header_size));
        }
        if self.endian_tag != ENDIAN_CONSTANT {
            return Err(DexError::BadEndianTag(self.endian_tag));
        }
        if self.file_size as usize != actual_len {
            return Err(DexError::FileSizeMismatch {
                field: self.file_size,
                actual: actual_len,
            });
        }

        let spans = self.index_spans();
        for span in &spans {
            let end = span.offset as u64 + span.length as u64;
            if end > self.file_size as u64 {
                return Err(DexError::OutOfBounds {
                    section: span.section,
                    offset: span.offset,
                    length: span.length,
                    file_size: self.file_size,
                });
            }
        }

        // Non-empty index sections must not intersect each other, the header,
        // or the data section; extraction relies on this.
        let data_span = (self.data_off as u64, self.data_off as u64 + self.data_size as u64);
        for (i, a) in spans.iter().enumerate() {
            if a.length == 0 {
                continue;
            }
            let (a0, a1) = (a.offset as u64, a.offset as u64 + a.length as u64);
            if a0 < HEADER_SIZE as u64 {
                return Err(DexError::Overlap {
                    a: a.section,
                    b: a.section,
                });
            }
            if self.data_size > 0 && a0 < data_span.1 && data_span.0 < a1 {
                return Err(DexError::Overlap {
                    a: a.section,
                    b: a.section,
                });
            }
            for b in spans.iter().skip(i + 1) {
                if b.length == 0 {
                    continue;
                }
                let (b0, b1) = (b.offset as u64, b.offset as u64 + b.length as u64);
                if a0 < b1 && b0 < a1 {
                    return Err(DexError::Overlap {
                        a: a.section,
                        b: b.section,
                    });
                }
            }
        }
        Ok(())
    }

    /// The six index spans in ascending file-offset order. Zero-length spans
    /// are kept so callers always see all six sections.
    pub fn index_spans(&self) -> Vec<IndexSpan> {
        let mut spans: Vec<IndexSpan> = SectionKind::ALL
            .iter()
            .map(|&section| {
                let (size, off) = self.section_raw(section);
                IndexSpan {
                    section,
                    offset: off,
                    length: size * section.entry_width(),
                }
            })
            .collect();
        spans.sort_by_key(|s| (s.offset, s.section));
        spans
    }
}

/// Concatenate the raw bytes of all six index sections in file-offset order.
/// Header and data bytes never appear in the output.
pub fn extract_index_bytes(raw: &[u8], header: &DexHeader) -> Result<IndexBytes, DexError> {
    let spans = header.index_spans();
    let total: usize = spans.iter().map(|s| s.length as usize).sum();
    let mut bytes = Vec::with_capacity(total);
    for span in &spans {
        let start = span.offset as usize;
        let end = start + span.length as usize;
        if end > raw.len() {
            return Err(DexError::OutOfBounds {
                section: span.section,
                offset: span.offset,
                length: span.length,
                file_size: raw.len() as u32,
            });
        }
        bytes.extend_from_slice(&raw[start..end]);
    }
    Ok(IndexBytes { bytes, spans })
}

/// Adler-32 over everything after magic and checksum (offset 12 onward).
pub fn dex_checksum(raw: &[u8]) -> u32 {
    const MOD: u32 = 65_521;
    let mut s1: u32 = 1;
    let mut s2: u32 = 0;
    for &b in &raw[12.min(raw.len())..] {
        s1 = (s1 + b as u32) % MOD;
        s2 = (s2 + s1) % MOD;
    }
    (s2 << 16) | s1
}

/// Strict-mode check that the header checksum matches the file contents.
pub fn verify_checksum(raw: &[u8], header: &DexHeader) -> Result<(), DexError> {
    let computed = dex_checksum(raw);
    if computed != header.checksum {
        return Err(DexError::ChecksumMismatch {
            expected: header.checksum,
            computed,
        });
    }
    Ok(())
}
