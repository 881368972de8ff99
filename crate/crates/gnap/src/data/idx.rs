//! IDX (big-endian) image and label files.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use super::{DataError, Dataset};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(cursor: &mut Cursor<Vec<u8>>) -> Result<u32, DataError> {
    let offset = cursor.position() as usize;
    cursor.read_u32::<BigEndian>().map_err(|_| DataError::Truncated {
        offset,
        needed: 4,
    })
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut imgs = Cursor::new(fs::read(images_path)?);
    let magic = read_u32(&mut imgs)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            offset: 0,
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = read_u32(&mut imgs)? as usize;
    let rows = read_u32(&mut imgs)? as usize;
    let cols = read_u32(&mut imgs)? as usize;
    let pixel_bytes = count * rows * cols;
    let offset = imgs.position() as usize;
    let raw = imgs.into_inner();
    if raw.len() < offset + pixel_bytes {
        return Err(DataError::Truncated {
            offset: raw.len(),
            needed: offset + pixel_bytes - raw.len(),
        });
    }
    let images: Vec<f32> = raw[offset..offset + pixel_bytes]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();

    let mut lbls = Cursor::new(fs::read(labels_path)?);
    let magic = read_u32(&mut lbls)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            offset: 0,
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let label_count = read_u32(&mut lbls)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let offset = lbls.position() as usize;
    let raw = lbls.into_inner();
    if raw.len() < offset + label_count {
        return Err(DataError::Truncated {
            offset: raw.len(),
            needed: offset + label_count - raw.len(),
        });
    }
    let labels: Vec<usize> = raw[offset..offset + label_count]
        .iter()
        .map(|&b| b as usize)
        .collect();

    let dataset = Dataset {
        images,
        n: count,
        channels: 1,
        height: rows,
        width: cols,
        labels,
        classes: 10,
        name: "mnist".into(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Serialize images back to the IDX layout (pixels quantized to bytes).
pub fn write_idx_images(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out: Vec<u8> = Vec::new();
    out.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    out.write_u32::<BigEndian>(dataset.n as u32)?;
    out.write_u32::<BigEndian>(dataset.height as u32)?;
    out.write_u32::<BigEndian>(dataset.width as u32)?;
    assert_eq!(dataset.channels, 1, "IDX images are single channel");
    out.extend(
        dataset
            .images
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out: Vec<u8> = Vec::new();
    out.write_u32::<BigEndian>(LABEL_MAGIC)?;
    out.write_u32::<BigEndian>(dataset.n as u32)?;
    out.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    /// Hand-built two-image fixture written against the published layout.
    fn write_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut imgs: Vec<u8> = Vec::new();
        imgs.extend(0x0000_0803u32.to_be_bytes());
        imgs.extend(2u32.to_be_bytes());
        imgs.extend(28u32.to_be_bytes());
        imgs.extend(28u32.to_be_bytes());
        for i in 0..2 * 28 * 28 {
            imgs.push((i % 256) as u8);
        }
        let mut lbls: Vec<u8> = Vec::new();
        lbls.extend(0x0000_0801u32.to_be_bytes());
        lbls.extend(2u32.to_be_bytes());
        lbls.push(7);
        lbls.push(1);
        let ip = dir.join("images.idx");
        let lp = dir.join("labels.idx");
        fs::write(&ip, imgs).unwrap();
        fs::write(&lp, lbls).unwrap();
        (ip, lp)
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = fixture_dir();
        let (ip, lp) = write_fixture(dir.path());
        let d = load_mnist(&ip, &lp).unwrap();
        assert_eq!((d.n, d.channels, d.height, d.width), (2, 1, 28, 28));
        assert_eq!(d.labels, vec![7, 1]);
        // pixel byte 255 scales to exactly 1.0
        assert_eq!(d.images[255], 1.0);
        assert_eq!(d.images[0], 0.0);
    }

    #[test]
    fn truncated_header_names_the_offset() {
        let dir = fixture_dir();
        let ip = dir.path().join("short.idx");
        fs::write(&ip, [0u8, 0, 8, 3, 0, 0]).unwrap();
        let err = load_mnist(&ip, &ip).unwrap_err();
        match err {
            DataError::Truncated { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = fixture_dir();
        let ip = dir.path().join("bad.idx");
        let mut raw = Vec::new();
        raw.extend(0xdeadbeefu32.to_be_bytes());
        raw.extend([0u8; 12]);
        fs::write(&ip, raw).unwrap();
        assert!(matches!(
            load_mnist(&ip, &ip),
            Err(DataError::BadMagic {
                found: 0xdeadbeef,
                ..
            })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = fixture_dir();
        let (ip, _) = write_fixture(dir.path());
        let lp = dir.path().join("labels3.idx");
        let mut lbls: Vec<u8> = Vec::new();
        lbls.extend(0x0000_0801u32.to_be_bytes());
        lbls.extend(3u32.to_be_bytes());
        lbls.extend([0, 1, 2]);
        fs::write(&lp, lbls).unwrap();
        assert!(matches!(
            load_mnist(&ip, &lp),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = fixture_dir();
        let (ip, lp) = write_fixture(dir.path());
        let d = load_mnist(&ip, &lp).unwrap();
        let ip2 = dir.path().join("again.idx");
        let lp2 = dir.path().join("again-labels.idx");
        write_idx_images(&d, &ip2).unwrap();
        write_idx_labels(&d, &lp2).unwrap();
        let d2 = load_mnist(&ip2, &lp2).unwrap();
        assert_eq!(d.images, d2.images);
        assert_eq!(d.labels, d2.labels);
        assert_eq!(fs::read(&ip).unwrap(), fs::read(&ip2).unwrap());
    }
}
