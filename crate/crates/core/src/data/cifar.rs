//! CIFAR-10 binary batches: 10000 records of one label byte followed by
//! 3072 channel-major pixel bytes.

use crate::error::{Error, Result};

pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const PIXELS: usize = 3 * 32 * 32;
pub const RECORDS_PER_BATCH: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Splits a batch file into (labels, pixels).
pub fn parse_batch(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "cifar batch of {} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("cifar label {} out of range", rec[0])));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn write_batch(labels: &[u8], pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * PIXELS {
        return Err(Error::shape(format!("{} labels but {} pixel bytes", labels.len(), pixels.len())));
    }
    let mut out = Vec::with_capacity(labels.len() * RECORD_BYTES);
    for (l, p) in labels.iter().zip(pixels.chunks_exact(PIXELS)) {
        out.push(*l);
        out.extend_from_slice(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let labels = vec![3u8, 9];
        let pixels: Vec<u8> = (0..2 * PIXELS).map(|i| (i % 251) as u8).collect();
        let bytes = write_batch(&labels, &pixels).unwrap();
        assert_eq!(bytes.len(), 2 * RECORD_BYTES);
        assert_eq!(bytes[RECORD_BYTES], 9);
        assert_eq!(parse_batch(&bytes).unwrap(), (labels, pixels));
    }

    #[test]
    fn rejects_partial_records_and_bad_labels() {
        assert!(parse_batch(&[0u8; RECORD_BYTES + 1]).is_err());
        assert!(parse_batch(&[]).is_err());
        let mut rec = vec![0u8; RECORD_BYTES];
        rec[0] = 10;
        assert!(parse_batch(&rec).is_err());
    }
}
