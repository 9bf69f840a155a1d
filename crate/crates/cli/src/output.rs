use clap::ValueEnum;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Writes tables and the manifest into one directory, tagging each table with
/// the configuration hash and seed.
pub struct OutputDir {
    pub dir: PathBuf,
    pub format: Format,
    hash: String,
    seed: u64,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    config_sha256: &'a str,
    seed: u64,
    data: &'a T,
}

impl OutputDir {
    pub fn create(dir: &Path, format: Format, hash: &str, seed: u64) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(OutputDir { dir: dir.to_path_buf(), format, hash: hash.to_string(), seed, files: vec![] })
    }

    fn write_file(&mut self, name: &str, body: &[u8]) -> std::io::Result<()> {
        let mut f = std::fs::File::create(self.dir.join(name))?;
        f.write_all(body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// `csv` is used for the CSV format, `value` for JSON.
    pub fn table<T: Serialize>(&mut self, stem: &str, csv: &str, value: &T) -> std::io::Result<()> {
        match self.format {
            Format::Csv => {
                let body = format!("# config_sha256={} seed={}\n{csv}", self.hash, self.seed);
                self.write_file(&format!("{stem}.csv"), body.as_bytes())
            }
            Format::Json => {
                let tagged = Tagged { config_sha256: &self.hash, seed: self.seed, data: value };
                let body = serde_json::to_vec_pretty(&tagged).map_err(std::io::Error::other)?;
                self.write_file(&format!("{stem}.json"), &body)
            }
        }
    }

    /// Untagged JSON document (manifest, error record).
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut body = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
        body.push(b'\n');
        self.write_file(name, &body)
    }
}

/// `key,value` rows.
pub fn key_values(rows: &[(&str, String)]) -> String {
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}
