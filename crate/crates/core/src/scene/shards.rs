//! Dataset shards: length-prefixed scene records plus a checksummed
//! manifest. See `docs/formats.md`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, SceneSpec, SyntheticScene};
use crate::diffusion::Tensor;
use crate::error::{Error, Result};
use crate::layout::format::LayoutDocument;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "anylevel-dataset";
const SHARD_MAGIC: &[u8; 4] = b"ALDS";
const SHARD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub count: usize,
    /// Hex SHA-256 of the shard file.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: SceneSpec,
    pub seed: u64,
    pub count: usize,
    pub shards: Vec<ShardEntry>,
}

impl DatasetManifest {
    /// SHA-256 of the serialized manifest; identifies the dataset.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec_pretty(self)?)))
    }
}

/// An in-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, seed: u64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("dataset count must be positive"));
        }
        let scenes = (0..count).map(|i| generate_scene(spec, scene_seed(seed, i))).collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            version: SHARD_VERSION,
            spec: spec.clone(),
            seed,
            count,
            shards: Vec::new(),
        };
        Ok(Self { manifest, scenes })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.manifest.spec
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Seed of scene `index` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn encode_record(scene: &SyntheticScene, spec: &SceneSpec) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let img = &scene.image;
    out.extend_from_slice(&(img.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let doc = serde_json::to_vec(&LayoutDocument::from_layout(&scene.layout(spec)))?;
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(&doc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    shard: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("shard {} is truncated", self.shard)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_record(r: &mut Reader<'_>) -> Result<SyntheticScene> {
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let raw = r.take(c * h * w * 4)?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    let len = r.u32()? as usize;
    let doc: LayoutDocument = serde_json::from_slice(r.take(len)?)?;
    let layout = doc.into_layout(None)?;
    Ok(SyntheticScene { image: Tensor::from_vec(c, h, w, data), regions: layout.regions })
}

/// Generates `count` scenes and writes them as shards of at most
/// `shard_size` records under `dir`, followed by the manifest.
pub fn write_shards(dir: &Path, spec: &SceneSpec, seed: u64, count: usize, shard_size: usize) -> Result<DatasetManifest> {
    if shard_size == 0 {
        return Err(Error::invalid("shard size must be positive"));
    }
    let mut dataset = Dataset::generate(spec, seed, count)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, chunk) in dataset.scenes.chunks(shard_size).enumerate() {
        let file = format!("shard-{k:05}.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(SHARD_MAGIC);
        bytes.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(chunk.len() as u32).to_le_bytes());
        for scene in chunk {
            let record = encode_record(scene, spec)?;
            bytes.extend_from_slice(&(record.len() as u32).to_le_bytes());
            bytes.extend_from_slice(&record);
        }
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        dataset.manifest.shards.push(ShardEntry { file, count: chunk.len(), sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&dataset.manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(dataset.manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != SHARD_VERSION {
        return Err(Error::Format(format!("unsupported dataset {} v{}", manifest.format, manifest.version)));
    }
    Ok(manifest)
}

/// Reads a single shard after verifying its checksum.
pub fn read_shard(dir: &Path, entry: &ShardEntry) -> Result<Vec<SyntheticScene>> {
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(Error::Checksum { shard: entry.file.clone() });
    }
    let mut r = Reader { bytes: &bytes, pos: 0, shard: &entry.file };
    if r.take(4)? != SHARD_MAGIC || r.u32()? != SHARD_VERSION {
        return Err(Error::Format(format!("{} is not a version {SHARD_VERSION} shard", entry.file)));
    }
    let n = r.u32()? as usize;
    if n != entry.count {
        return Err(Error::Format(format!("shard {} holds {n} records, manifest says {}", entry.file, entry.count)));
    }
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        let mut inner = Reader { bytes: body, pos: 0, shard: &entry.file };
        scenes.push(decode_record(&mut inner)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("trailing bytes in shard {}", entry.file)));
    }
    Ok(scenes)
}

/// Loads and verifies every shard listed in `dir/manifest.json`.
pub fn read_shards(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    manifest.spec.validate()?;
    let mut scenes = Vec::with_capacity(manifest.count);
    for entry in &manifest.shards {
        scenes.extend(read_shard(dir, entry)?);
    }
    if scenes.len() != manifest.count {
        return Err(Error::Format(format!("manifest declares {} scenes, shards hold {}", manifest.count, scenes.len())));
    }
    if scenes.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    Ok(Dataset { manifest, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::toy(5);
        let manifest = write_shards(dir.path(), &spec, 11, 100, 30).unwrap();
        assert_eq!(manifest.shards.len(), 4);
        let back = read_shards(dir.path()).unwrap();
        let fresh = Dataset::generate(&spec, 11, 100).unwrap();
        assert_eq!(back.scenes, fresh.scenes);
        assert_eq!(back.manifest, manifest);
    }

    #[test]
    fn shards_are_independently_readable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::toy(5);
        let manifest = write_shards(dir.path(), &spec, 2, 10, 4).unwrap();
        let all = Dataset::generate(&spec, 2, 10).unwrap().scenes;
        let second = read_shard(dir.path(), &manifest.shards[1]).unwrap();
        assert_eq!(second, all[4..8]);
    }

    #[test]
    fn corrupted_byte_names_the_shard() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_shards(dir.path(), &SceneSpec::toy(5), 3, 10, 5).unwrap();
        let path = dir.path().join(&manifest.shards[1].file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 1;
        fs::write(&path, bytes).unwrap();
        match read_shards(dir.path()) {
            Err(Error::Checksum { shard }) => assert_eq!(shard, "shard-00001.bin"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_shards(dir.path(), &SceneSpec::toy(5), 3, 10, 5).unwrap();
        manifest.count = 11;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
        assert!(read_shards(dir.path()).unwrap_err().to_string().contains("declares 11"));
    }

    #[test]
    fn zero_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_shards(dir.path(), &SceneSpec::toy(5), 0, 0, 5).is_err());
    }

    #[test]
    fn checksums_are_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SceneSpec::toy(5);
        let ma = write_shards(a.path(), &spec, 5, 20, 8).unwrap();
        let mb = write_shards(b.path(), &spec, 5, 20, 8).unwrap();
        assert_eq!(ma.checksum().unwrap(), mb.checksum().unwrap());
    }
}
