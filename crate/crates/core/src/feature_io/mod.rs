//! Serialized frozen-backbone features: bundles, text banks, manifests and
//! the synthetic generator.

mod binio;
mod bundle;
mod manifest;
mod synth;
mod textbank;

pub(crate) use binio::ByteReader;
pub(crate) use binio::{put_f64s, put_u32, read_file, to_u32, write_file};

pub use bundle::{
    decode_bundle, encode_bundle, read_bundle, validate_bundle, write_bundle, FeatureBundle,
    Violation,
};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, ManifestEntry, Split};
pub use synth::{
    synth_dataset, write_synth, SynthDataset, SynthSpec, MANIFEST_FILE, SYNTH_LAYER_STRIDE,
    TEXTBANK_FILE,
};
pub use textbank::{
    decode_textbank, encode_textbank, pool_prompts, read_textbank, validate_textbank,
    write_textbank, TextBank, ABNORMAL, NORMAL,
};

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Loads every bundle of `split`, resolving paths against `base`.
pub fn load_split(
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
) -> Result<Vec<(PathBuf, FeatureBundle)>> {
    manifest
        .split(split)
        .map(|e| {
            let path = base.join(&e.path);
            let bundle = read_bundle(&path)?;
            Ok((path, bundle))
        })
        .collect()
}
