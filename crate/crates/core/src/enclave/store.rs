//! Persistent device-keyed store of sealed rule records.
//!
//! File layout: the 8-byte magic `CLKSTORE`, a big-endian `u32` format
//! version, then an append-only sequence of records, each
//! `u32 len || device id || u32 len || SealedRecord JSON`. The in-memory index
//! keeps the last record per device, so a re-provisioned device simply appends.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::envelope::SealedRecord;
use crate::error::{Error, Result};
use crate::rule::DeviceId;

pub const STORE_MAGIC: &[u8; 8] = b"CLKSTORE";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct SealedStore {
    index: HashMap<DeviceId, SealedRecord>,
    log: Option<(PathBuf, File)>,
}

impl SealedStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens or creates a store file and replays its log.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut index = HashMap::new();
        if path.exists() && std::fs::metadata(path)?.len() > 0 {
            let mut r = BufReader::new(File::open(path)?);
            let mut magic = [0u8; 8];
            r.read_exact(&mut magic)?;
            if &magic != STORE_MAGIC {
                return Err(Error::Config(format!("{} is not a rule store", path.display())));
            }
            let version = read_u32(&mut r)?.ok_or_else(|| truncated(path))?;
            if version != STORE_VERSION {
                return Err(Error::Config(format!(
                    "{}: unsupported store version {version}",
                    path.display()
                )));
            }
            while let Some(dev_len) = read_u32(&mut r)? {
                let device = read_exact_vec(&mut r, dev_len as usize).map_err(|_| truncated(path))?;
                let rec_len = read_u32(&mut r)?.ok_or_else(|| truncated(path))?;
                let body = read_exact_vec(&mut r, rec_len as usize).map_err(|_| truncated(path))?;
                let device = DeviceId::new(String::from_utf8_lossy(&device).into_owned())?;
                let record: SealedRecord = serde_json::from_slice(&body)
                    .map_err(|e| Error::Config(format!("{}: bad record: {e}", path.display())))?;
                if record.device != device {
                    return Err(Error::Config(format!(
                        "{}: record key `{device}` does not match record device `{}`",
                        path.display(),
                        record.device
                    )));
                }
                index.insert(device, record);
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            file.write_all(STORE_MAGIC)?;
            file.write_all(&STORE_VERSION.to_be_bytes())?;
            file.sync_data()?;
        }
        Ok(SealedStore {
            index,
            log: Some((path.to_path_buf(), file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn get(&self, device: &DeviceId) -> Option<&SealedRecord> {
        self.index.get(device)
    }

    pub fn put(&mut self, record: SealedRecord) -> Result<()> {
        if let Some((_, file)) = &mut self.log {
            let device = record.device.as_str().as_bytes();
            let body = serde_json::to_vec(&record).expect("record serializes");
            let mut frame = Vec::with_capacity(8 + device.len() + body.len());
            frame.extend_from_slice(&(device.len() as u32).to_be_bytes());
            frame.extend_from_slice(device);
            frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
            frame.extend_from_slice(&body);
            file.write_all(&frame)?;
        }
        self.index.insert(record.device.clone(), record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((_, file)) = &mut self.log {
            file.sync_data()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceId> {
        self.index.keys()
    }

    pub fn records(&self) -> impl Iterator<Item = &SealedRecord> {
        self.index.values()
    }
}

fn truncated(path: &Path) -> Error {
    Error::Config(format!("{}: truncated store file", path.display()))
}

fn read_u32(r: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(Error::Config("truncated length prefix".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_be_bytes(buf)))
}

fn read_exact_vec(r: &mut impl Read, len: usize) -> std::io::Result<Vec<u8>> {
    let mut v = vec![0u8; len];
    r.read_exact(&mut v)?;
    Ok(v)
}
