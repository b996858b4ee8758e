//! On-disk representation: the binary blob format, directory manifests,
//! corpus and pair directories, and the synthetic generators that fill them.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::model::TokenMatrix;

pub mod corpus;
pub mod format;
pub mod manifest;
pub mod synth;

pub use corpus::{AlignedPairs, Corpus, DocMeta, FeatureMeta, QueryMeta};
pub use format::{decode_embeddings, decode_network, encode_embeddings, encode_network};
pub use manifest::{CorpusManifest, ManifestFiles, ManifestKind, MANIFEST_FILE};
pub use synth::{
    generate_aligned_pairs, generate_synthetic, AlignedSpec, SynthSpec, SyntheticSpec,
};

/// Writes `bytes` to a temporary file beside `path` and renames it into place,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_embeddings(path: &Path, matrices: &[&TokenMatrix]) -> Result<()> {
    write_atomic(path, &encode_embeddings(matrices)?)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<TokenMatrix>> {
    decode_embeddings(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.flmr");
        let m = TokenMatrix::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
        write_embeddings(&path, &[&m]).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), vec![m.clone()]);
        write_embeddings(&path, &[&m, &m]).unwrap();
        assert_eq!(read_embeddings(&path).unwrap().len(), 2);
        let leftovers = std::fs::read_dir(path.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
