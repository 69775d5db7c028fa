//! Downloads the four MNIST archives, verifies them against pinned digests,
//! and decompresses them next to the archives.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use md5::Md5;
use sha2::{Digest as _, Sha256};

use super::idx::IdxHeader;
use crate::error::{Error, Result};

pub const DEFAULT_MNIST_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
pub const MNIST_URL_ENV: &str = "DISTLAB_MNIST_URL";

const PINNED: &str = include_str!("../../mnist.checksums");

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Digest {
    Md5(String),
    Sha256(String),
}

impl Digest {
    fn compute_like(&self, bytes: &[u8]) -> String {
        match self {
            Digest::Md5(_) => hex(&Md5::digest(bytes)),
            Digest::Sha256(_) => hex(&Sha256::digest(bytes)),
        }
    }

    fn expected(&self) -> &str {
        match self {
            Digest::Md5(h) | Digest::Sha256(h) => h,
        }
    }

    fn matches(&self, bytes: &[u8]) -> bool {
        self.compute_like(bytes).eq_ignore_ascii_case(self.expected())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Archive file name -> expected digest.
#[derive(Debug, Clone, Default)]
pub struct ChecksumTable(BTreeMap<String, Digest>);

impl ChecksumTable {
    /// The digests shipped with this crate.
    pub fn mnist() -> Self {
        Self::parse(PINNED).expect("pinned checksum table is well-formed")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<_> = line.split_whitespace().collect();
            let [algo, digest, name] = fields[..] else {
                return Err(Error::InvalidConfig(format!("bad checksum line {line:?}")));
            };
            let digest = match algo {
                "md5" => Digest::Md5(digest.to_lowercase()),
                "sha256" => Digest::Sha256(digest.to_lowercase()),
                other => {
                    return Err(Error::InvalidConfig(format!("unknown digest {other:?}")))
                }
            };
            table.insert(name.to_string(), digest);
        }
        Ok(Self(table))
    }

    pub fn insert(&mut self, archive: impl Into<String>, digest: Digest) {
        self.0.insert(archive.into(), digest);
    }

    fn get(&self, archive: &str) -> Result<&Digest> {
        self.0
            .get(archive)
            .ok_or_else(|| Error::InvalidConfig(format!("no pinned checksum for {archive}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Picks the base URL: explicit flag, then `DISTLAB_MNIST_URL`, then the default.
pub fn resolve_base_url(flag: Option<&str>) -> String {
    flag.map(str::to_owned)
        .or_else(|| std::env::var(MNIST_URL_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_MNIST_URL.to_owned())
}

/// Ensures the four decompressed MNIST files exist in `dest_dir`. Files whose
/// archive already verifies are not downloaded again; with `offline` set a
/// missing or corrupt file is an error instead of a download.
pub fn fetch_mnist(
    base_url: &str,
    dest_dir: &Path,
    offline: bool,
    checksums: &ChecksumTable,
) -> Result<MnistFiles> {
    fs::create_dir_all(dest_dir).map_err(|e| Error::io(dest_dir, e))?;
    let mut paths = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .into_iter()
        .map(|name| fetch_one(base_url, dest_dir, name, offline, checksums));
    let mut next = || paths.next().expect("four files");
    Ok(MnistFiles {
        train_images: next()?,
        train_labels: next()?,
        test_images: next()?,
        test_labels: next()?,
    })
}

fn fetch_one(
    base_url: &str,
    dest_dir: &Path,
    name: &str,
    offline: bool,
    checksums: &ChecksumTable,
) -> Result<PathBuf> {
    let archive = format!("{name}.gz");
    let digest = checksums.get(&archive)?;
    let gz_path = dest_dir.join(&archive);
    let out_path = dest_dir.join(name);

    if let Ok(existing) = fs::read(&gz_path) {
        if digest.matches(&existing) && decompressed_is_valid(&out_path) {
            return Ok(out_path);
        }
    }
    if offline {
        return Err(Error::Offline(gz_path.display().to_string()));
    }

    let url = format!("{}/{archive}", base_url.trim_end_matches('/'));
    let bytes = download(&url)?;
    if !digest.matches(&bytes) {
        return Err(Error::ChecksumMismatch {
            file: archive,
            expected: digest.expected().to_owned(),
            actual: digest.compute_like(&bytes),
        });
    }
    fs::write(&gz_path, &bytes).map_err(|e| Error::io(&gz_path, e))?;
    let mut raw = Vec::new();
    GzDecoder::new(bytes.as_slice())
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(&gz_path, e))?;
    let header = IdxHeader::parse(&raw, &out_path)?;
    if header.expected_len() != raw.len() {
        return Err(Error::MalformedIdx {
            path: out_path,
            reason: format!(
                "header implies {} bytes, archive holds {}",
                header.expected_len(),
                raw.len()
            ),
        });
    }
    fs::write(&out_path, &raw).map_err(|e| Error::io(&out_path, e))?;
    Ok(out_path)
}

fn decompressed_is_valid(path: &Path) -> bool {
    let Ok(raw) = fs::read(path) else {
        return false;
    };
    IdxHeader::parse(&raw, path)
        .map(|h| h.expected_len() == raw.len())
        .unwrap_or(false)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let net = |reason: String| Error::Network {
        url: url.to_owned(),
        reason,
    };
    let mut response = ureq::get(url).call().map_err(|e| net(e.to_string()))?;
    let mut bytes = Vec::new();
    response
        .body_mut()
        .as_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| net(e.to_string()))?;
    Ok(bytes)
}
