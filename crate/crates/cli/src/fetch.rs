//! Optional MNIST download. Every file is checked against the SHA-256 of its
//! decompressed IDX content before it is kept.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use sparce::data::load_idx;

use crate::config::hex;
use crate::CliError;

pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// `(gzipped file name, SHA-256 of the decompressed IDX bytes)`.
pub const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte.gz", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte.gz", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte.gz", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

/// `base` is an http(s) URL or a local directory holding the same files.
fn get(base: &str, name: &str) -> Result<Vec<u8>, CliError> {
    if base.starts_with("http://") || base.starts_with("https://") {
        let url = format!("{}/{name}", base.trim_end_matches('/'));
        let resp = reqwest::blocking::get(&url)
            .and_then(|r| r.error_for_status())
            .map_err(|e| CliError::DataMissing(format!("download {url}: {e}")))?;
        let bytes = resp.bytes().map_err(|e| CliError::DataMissing(format!("download {url}: {e}")))?;
        Ok(bytes.to_vec())
    } else {
        let p = Path::new(base).join(name);
        fs::read(&p).map_err(|e| CliError::DataMissing(format!("{}: {e}", p.display())))
    }
}

/// Checks the IDX content of `path` against `sha256`.
pub fn verify(path: &Path, sha256: &str) -> Result<(), CliError> {
    let t = load_idx(path).map_err(|e| CliError::DataMissing(format!("{}: {e}", path.display())))?;
    let got = hex(&Sha256::digest(t.to_bytes()));
    if got != sha256 {
        return Err(CliError::DataMissing(format!("{}: checksum {got} does not match {sha256}", path.display())));
    }
    Ok(())
}

/// Fetches the four files into `dir`, skipping files already present and valid.
pub fn fetch_mnist(dir: &Path, base: &str, files: &[(&str, &str)]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (name, sha) in files {
        let dest = dir.join(name);
        if dest.is_file() && verify(&dest, sha).is_ok() {
            eprintln!("{name}: present");
            continue;
        }
        let partial = dir.join(format!("{name}.part"));
        fs::write(&partial, get(base, name)?)?;
        if let Err(e) = verify(&partial, sha) {
            let _ = fs::remove_file(&partial);
            return Err(e);
        }
        fs::rename(&partial, &dest)?;
        eprintln!("{name}: ok");
    }
    Ok(())
}
