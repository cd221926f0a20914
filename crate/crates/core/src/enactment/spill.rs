//! Disk FIFO for units that overflow a full connection when spilling is on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::PathBuf;

use crate::blob::BlobStore;
use crate::value::{decode_unit, encode_unit, DataUnit};

pub(crate) struct SpillFile {
    path: PathBuf,
    writer: BufWriter<File>,
    reader: BufReader<File>,
    pending: usize,
    dirty: bool,
}

impl SpillFile {
    pub fn create(blobs: &BlobStore, prefix: &str) -> std::io::Result<Self> {
        let (path, file) = blobs.create_temp(prefix).map_err(std::io::Error::other)?;
        let reader = BufReader::new(File::open(&path)?);
        Ok(SpillFile { path, writer: BufWriter::new(file), reader, pending: 0, dirty: false })
    }

    pub fn is_empty(&self) -> bool {
        self.pending == 0
    }

    /// Append one unit; returns the bytes written.
    pub fn push(&mut self, unit: &DataUnit) -> std::io::Result<u64> {
        let body = encode_unit(unit);
        self.writer.write_all(&(body.len() as u64).to_le_bytes())?;
        self.writer.write_all(&body)?;
        self.pending += 1;
        self.dirty = true;
        Ok(8 + body.len() as u64)
    }

    pub fn pop(&mut self) -> std::io::Result<Option<DataUnit>> {
        if self.pending == 0 {
            return Ok(None);
        }
        if self.dirty {
            self.writer.flush()?;
            self.dirty = false;
        }
        let mut len = [0u8; 8];
        self.reader.read_exact(&mut len)?;
        let mut body = vec![0u8; u64::from_le_bytes(len) as usize];
        self.reader.read_exact(&mut body)?;
        self.pending -= 1;
        decode_unit(&body).map(Some).map_err(std::io::Error::other)
    }
}

impl Drop for SpillFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_order_across_interleaved_push_pop() {
        let store = BlobStore::in_memory();
        let mut f = SpillFile::create(&store, "t").unwrap();
        for i in 0..5 {
            f.push(&DataUnit::scalar(i as f64)).unwrap();
        }
        assert_eq!(f.pop().unwrap().unwrap().payload, DataUnit::scalar(0.0).payload);
        f.push(&DataUnit::scalar(5.0)).unwrap();
        let rest: Vec<_> = std::iter::from_fn(|| f.pop().unwrap()).map(|u| u.payload).collect();
        assert_eq!(rest, (1..6).map(|i| DataUnit::scalar(i as f64).payload).collect::<Vec<_>>());
        assert_eq!(store.files_created(), 1);
    }
}
