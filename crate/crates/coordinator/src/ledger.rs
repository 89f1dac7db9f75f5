//! Append-only `ledger.jsonl`: one full entity snapshot per line, synced to
//! disk before the write is acknowledged. Replay keeps the last snapshot of
//! each entity.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use eaas_core::{DeviceProfile, EnergyListing};
use serde::{Deserialize, Serialize};

use crate::model::TransactionRecord;

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entity", content = "data", rename_all = "snake_case")]
pub enum Entity {
    Device(DeviceProfile),
    Listing(EnergyListing),
    Transaction(TransactionRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerLine {
    pub seq: u64,
    #[serde(flatten)]
    pub entity: Entity,
}

#[derive(Debug)]
pub struct Ledger {
    file: File,
    path: PathBuf,
}

impl Ledger {
    /// Opens (creating if needed) the ledger in `dir` and returns every
    /// complete line already in it. A torn final line left by a crash
    /// mid-write is cut off; corruption anywhere else is an error.
    pub fn open(dir: &Path) -> io::Result<(Self, Vec<LedgerLine>)> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LEDGER_FILE);
        let text = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut lines = Vec::new();
        let mut offset = 0usize;
        let mut good_len = 0usize;
        while offset < text.len() {
            let end = text[offset..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|p| offset + p);
            let raw = &text[offset..end.unwrap_or(text.len())];
            if !raw.iter().all(u8::is_ascii_whitespace) {
                match serde_json::from_slice::<LedgerLine>(raw) {
                    Ok(line) => lines.push(line),
                    Err(_) if end.is_none() => break,
                    Err(e) => {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}: bad record at byte {offset}: {e}", path.display()),
                        ))
                    }
                }
            }
            match end {
                Some(e) => {
                    offset = e + 1;
                    good_len = offset;
                }
                None => {
                    offset = text.len();
                    good_len = offset;
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if good_len < text.len() {
            file.set_len(good_len as u64)?;
            file.sync_all()?;
        }
        Ok((Self { file, path }, lines))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, line: &LedgerLine) -> io::Result<()> {
        let mut bytes = serde_json::to_vec(line).map_err(io::Error::other)?;
        bytes.push(b'\n');
        self.file.write_all(&bytes)?;
        self.file.sync_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use eaas_core::{EnergyAmount, ListingState, Role};

    fn device(id: &str) -> LedgerLine {
        LedgerLine {
            seq: 1,
            entity: Entity::Device(DeviceProfile {
                device_id: id.into(),
                display_name: "A".into(),
                capacity_mwh: 0.1 + 0.2,
                microcell_id: "m1".into(),
            }),
        }
    }

    #[test]
    fn append_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut l, lines) = Ledger::open(dir.path()).unwrap();
            assert!(lines.is_empty());
            l.append(&device("a")).unwrap();
            l.append(&LedgerLine {
                seq: 2,
                entity: Entity::Listing(EnergyListing {
                    listing_id: "l1".into(),
                    device_id: "a".into(),
                    role: Role::Provider,
                    amount: EnergyAmount::new(10).unwrap(),
                    created_at: 1.5,
                    state: ListingState::Open,
                }),
            })
            .unwrap();
        }
        let (_, lines) = Ledger::open(dir.path()).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], device("a"));
    }

    #[test]
    fn line_format() {
        let text = serde_json::to_string(&device("a")).unwrap();
        assert_eq!(
            text,
            r#"{"seq":1,"entity":"device","data":{"device_id":"a","display_name":"A","capacity_mwh":0.30000000000000004,"microcell_id":"m1"}}"#
        );
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut l, _) = Ledger::open(dir.path()).unwrap();
            l.append(&device("a")).unwrap();
        }
        let path = dir.path().join(LEDGER_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":2,"entity":"dev"#).unwrap();
        drop(f);
        let (mut l, lines) = Ledger::open(dir.path()).unwrap();
        assert_eq!(lines.len(), 1);
        l.append(&device("b")).unwrap();
        let (_, lines) = Ledger::open(dir.path()).unwrap();
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LEDGER_FILE), "garbage\n{}\n").unwrap();
        assert!(Ledger::open(dir.path()).is_err());
    }
}
