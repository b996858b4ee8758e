//! The `FLMR` binary container.
//!
//! Every file starts with the same 12-byte preamble:
//!
//! ```text
//! 0   magic      b"FLMR"
//! 4   version    u32 LE (currently 1)
//! 8   kind       u32 LE (1 = token matrices, 2 = mapping network, 3 = postings)
//! ```
//!
//! All integers are little-endian `u32`; token values are little-endian `f32`,
//! network parameters little-endian `f64`. See `docs/format.md` for the full
//! per-kind layout.

use crate::error::{Error, Result};
use crate::model::{MappingNetwork, TokenLabel, TokenMatrix};

pub const MAGIC: [u8; 4] = *b"FLMR";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_TOKENS: u32 = 1;
pub const KIND_NETWORK: u32 = 2;
pub const KIND_POSTINGS: u32 = 3;

const FLAG_LABELS: u32 = 1;
const ROI_TAG: u32 = 0x8000_0000;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(kind: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(kind);
        w
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn len_u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Bounds-checked little-endian reader; every failure reports the byte offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version and kind.
    pub(crate) fn open(bytes: &'a [u8], kind: u32) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let found = r.u32()?;
        if found != kind {
            return Err(Error::SectionKind {
                found,
                expected: kind,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(self.bytes.len())),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Fails early when `count` items of `width` bytes cannot possibly fit.
    pub(crate) fn ensure(&self, count: usize, width: usize) -> Result<()> {
        match count.checked_mul(width) {
            Some(n) if n <= self.remaining() => Ok(()),
            _ => Err(Error::Truncated(self.bytes.len())),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        self.ensure(n, 4)?;
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.ensure(n, 8)?;
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn encode_label(l: TokenLabel) -> Result<u32> {
    Ok(match l {
        TokenLabel::Text => 0,
        TokenLabel::GlobalImage => 1,
        TokenLabel::DocImage => 2,
        TokenLabel::Roi(k) if k < ROI_TAG => ROI_TAG | k,
        TokenLabel::Roi(k) => return Err(Error::Format(format!("ROI index {k} too large"))),
    })
}

fn decode_label(code: u32) -> Result<TokenLabel> {
    Ok(match code {
        0 => TokenLabel::Text,
        1 => TokenLabel::GlobalImage,
        2 => TokenLabel::DocImage,
        c if c & ROI_TAG != 0 => TokenLabel::Roi(c & !ROI_TAG),
        c => return Err(Error::Format(format!("unknown row label code {c}"))),
    })
}

/// Serializes token matrices that all share one width.
///
/// Row labels are stored when every matrix carries them.
pub fn encode_embeddings(records: &[&TokenMatrix]) -> Result<Vec<u8>> {
    let first = records.first().ok_or(Error::Empty("empty corpus"))?;
    let dim = first.dim();
    if dim == 0 {
        return Err(Error::Format("token width must be at least 1".into()));
    }
    let labelled = records.iter().filter(|r| r.labels().is_some()).count();
    if labelled != 0 && labelled != records.len() {
        return Err(Error::Format(
            "cannot mix labelled and unlabelled matrices in one file".into(),
        ));
    }
    let mut w = Writer::new(KIND_TOKENS);
    w.len_u32(dim)?;
    w.len_u32(records.len())?;
    w.u32(if labelled > 0 { FLAG_LABELS } else { 0 });
    for (i, r) in records.iter().enumerate() {
        if r.dim() != dim {
            return Err(Error::dim("write_embeddings", dim, r.dim()));
        }
        if r.rows() == 0 {
            return Err(Error::Format(format!("record {i} has no rows")));
        }
        w.len_u32(r.rows())?;
    }
    if labelled > 0 {
        for r in records {
            for &l in r.labels().unwrap_or(&[]) {
                w.u32(encode_label(l)?);
            }
        }
    }
    for r in records {
        w.f32s(r.data());
    }
    Ok(w.finish())
}

/// Inverse of [`encode_embeddings`]. Never panics on malformed input.
pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<TokenMatrix>> {
    let mut r = Reader::open(bytes, KIND_TOKENS)?;
    let dim = r.usize()?;
    let count = r.usize()?;
    let flags = r.u32()?;
    if dim == 0 {
        return Err(Error::Format("token width is zero".into()));
    }
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    r.ensure(count, 4)?;
    let mut rows = Vec::with_capacity(count);
    let mut total: usize = 0;
    for i in 0..count {
        let n = r.usize()?;
        if n == 0 {
            return Err(Error::Format(format!("record {i} has no rows")));
        }
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::Format("row count overflow".into()))?;
        rows.push(n);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        r.ensure(total, 4)?;
        let mut all = Vec::with_capacity(total);
        for _ in 0..total {
            all.push(decode_label(r.u32()?)?);
        }
        Some(all)
    } else {
        None
    };
    let values = total
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("payload size overflow".into()))?;
    r.ensure(values, 4)?;
    let mut out = Vec::with_capacity(count);
    let mut label_at = 0;
    for n in rows {
        let m = TokenMatrix::new(n, dim, r.f32s(n * dim)?)?;
        let m = match &labels {
            Some(all) => m.with_labels(all[label_at..label_at + n].to_vec())?,
            None => m,
        };
        label_at += n;
        out.push(m);
    }
    r.finish()?;
    Ok(out)
}

/// Mapping network checkpoint: dimensions followed by `w1, b1, w2, b2` as `f64`.
pub fn encode_network(net: &MappingNetwork) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_NETWORK);
    for v in [net.d_v, net.hidden, net.n_vt, net.d_l] {
        w.len_u32(v)?;
    }
    let expect = [
        net.d_v * net.hidden,
        net.hidden,
        net.hidden * net.out_width(),
        net.out_width(),
    ];
    for (block, want) in [&net.w1, &net.b1, &net.w2, &net.b2].into_iter().zip(expect) {
        if block.len() != want {
            return Err(Error::Shape(format!(
                "parameter block has {} values, expected {want}",
                block.len()
            )));
        }
        w.f64s(block);
    }
    Ok(w.finish())
}

pub fn decode_network(bytes: &[u8]) -> Result<MappingNetwork> {
    let mut r = Reader::open(bytes, KIND_NETWORK)?;
    let d_v = r.usize()?;
    let hidden = r.usize()?;
    let n_vt = r.usize()?;
    let d_l = r.usize()?;
    if d_v == 0 || hidden == 0 || n_vt == 0 || d_l == 0 {
        return Err(Error::Format("network dimensions must be positive".into()));
    }
    let overflow = || Error::Format("network size overflow".into());
    let out = n_vt.checked_mul(d_l).ok_or_else(overflow)?;
    let n1 = d_v.checked_mul(hidden).ok_or_else(overflow)?;
    let n2 = hidden.checked_mul(out).ok_or_else(overflow)?;
    let total = [n1, hidden, n2, out]
        .into_iter()
        .try_fold(0usize, |a, b| a.checked_add(b))
        .ok_or_else(overflow)?;
    r.ensure(total, 8)?;
    let net = MappingNetwork {
        d_v,
        hidden,
        n_vt,
        d_l,
        w1: r.f64s(n1)?,
        b1: r.f64s(hidden)?,
        w2: r.f64s(n2)?,
        b2: r.f64s(out)?,
    };
    r.finish()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity2() -> TokenMatrix {
        TokenMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn two_by_two_layout() {
        let m = identity2();
        let bytes = encode_embeddings(&[&m]).unwrap();
        // preamble 12 + dim, count, flags 12 + one row count 4 = 28 header bytes
        assert_eq!(bytes.len(), 28 + 16);
        assert_eq!(&bytes[..4], b"FLMR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
        assert_eq!(decode_embeddings(&bytes).unwrap(), vec![m]);
    }

    #[test]
    fn empty_list_is_rejected() {
        let err = encode_embeddings(&[]).unwrap_err();
        assert_eq!(err.to_string(), "empty input: empty corpus");
    }

    #[test]
    fn mixed_widths_are_rejected() {
        let a = identity2();
        let b = TokenMatrix::from_rows(&[[1.0f32, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            encode_embeddings(&[&a, &b]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_embeddings(&[&identity2()]).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_embeddings(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic(_)));
        assert!(err.to_string().starts_with("bad magic"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_embeddings(&[&identity2()]).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_embeddings(&bytes),
            Err(Error::VersionMismatch {
                found: 7,
                expected: 1
            })
        ));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = encode_embeddings(&[&identity2()]).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let err = decode_embeddings(cut).unwrap_err();
        assert_eq!(err.to_string(), format!("truncated at byte {}", cut.len()));
        assert!(matches!(
            decode_embeddings(&bytes[..6]),
            Err(Error::Truncated(6))
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_embeddings(&[&identity2()]).unwrap();
        bytes.push(0);
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let mut w = Writer::new(KIND_TOKENS);
        w.u32(u32::MAX);
        w.u32(u32::MAX);
        w.u32(0);
        assert!(matches!(
            decode_embeddings(&w.finish()),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn labels_roundtrip() {
        let m = identity2()
            .with_labels(vec![TokenLabel::Text, TokenLabel::Roi(4)])
            .unwrap();
        let n = TokenMatrix::from_rows(&[[0.5f32, 0.5]])
            .unwrap()
            .labelled(TokenLabel::DocImage);
        let bytes = encode_embeddings(&[&m, &n]).unwrap();
        assert_eq!(decode_embeddings(&bytes).unwrap(), vec![m.clone(), n]);
        assert!(encode_embeddings(&[&m, &identity2()]).is_err());
    }

    #[test]
    fn hundred_random_matrices_seed_7() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mats: Vec<TokenMatrix> = (0..100)
            .map(|_| {
                let rows = rng.random_range(1..40);
                let data = (0..rows * 16)
                    .map(|_| rng.random_range(-3.0f32..3.0))
                    .collect();
                TokenMatrix::new(rows, 16, data).unwrap()
            })
            .collect();
        let refs: Vec<&TokenMatrix> = mats.iter().collect();
        let back = decode_embeddings(&encode_embeddings(&refs).unwrap()).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in mats.iter().zip(&back) {
            let bits_a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn network_roundtrip_and_errors() {
        let dims = Dims {
            d_v: 6,
            d_l: 3,
            n_vt: 2,
            n_roi: 0,
        };
        let net = MappingNetwork::init(&dims, 1);
        let bytes = encode_network(&net).unwrap();
        assert_eq!(bytes.len(), 12 + 16 + 8 * net.param_count());
        assert_eq!(decode_network(&bytes).unwrap(), net);
        assert!(matches!(
            decode_network(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_embeddings(&bytes),
            Err(Error::SectionKind {
                found: 2,
                expected: 1
            })
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), count in 1usize..8, dim in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mats: Vec<TokenMatrix> = (0..count).map(|_| {
                let rows = rng.random_range(1..10);
                let data = (0..rows * dim).map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff)).collect();
                TokenMatrix::new(rows, dim, data).unwrap()
            }).collect();
            let refs: Vec<&TokenMatrix> = mats.iter().collect();
            let back = decode_embeddings(&encode_embeddings(&refs).unwrap()).unwrap();
            for (a, b) in mats.iter().zip(&back) {
                prop_assert_eq!(a.rows(), b.rows());
                let bits_a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode_embeddings(&bytes);
            let _ = decode_network(&bytes);
        }
    }
}
