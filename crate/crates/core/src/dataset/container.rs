//! Little-endian container: 8-byte magic, six `u32` header fields
//! (`num_images, height, width, channels, num_categories, split_tag`), then
//! one `{u32 image_id, u16 category, H·W·C pixel bytes}` record per image.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FewShotDataset, LabeledImage, Split};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"MGRCLDS1";
const HEADER_LEN: usize = MAGIC.len() + 6 * 4;

pub fn write_to(ds: &FewShotDataset, mut w: impl Write) -> Result<()> {
    let u32_of =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::domain(format!("{what} {v} does not fit in u32")));
    w.write_all(&MAGIC)?;
    for field in [
        u32_of(ds.images.len(), "image count")?,
        u32_of(ds.size, "height")?,
        u32_of(ds.size, "width")?,
        u32_of(ds.channels, "channels")?,
        u32_of(ds.num_categories, "category count")?,
        ds.split.tag(),
    ] {
        w.write_all(&field.to_le_bytes())?;
    }
    for img in &ds.images {
        let category = u16::try_from(img.category)
            .map_err(|_| Error::domain(format!("category {} does not fit in u16", img.category)))?;
        w.write_all(&img.image_id.to_le_bytes())?;
        w.write_all(&category.to_le_bytes())?;
        w.write_all(&img.pixels)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save(ds: &FewShotDataset, path: impl AsRef<Path>) -> Result<()> {
    write_to(ds, BufWriter::new(File::create(path)?))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub fn read_from(mut r: impl Read) -> Result<FewShotDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse(&buf)
}

pub fn load(path: impl AsRef<Path>) -> Result<FewShotDataset> {
    read_from(BufReader::new(File::open(path)?))
}

fn parse(buf: &[u8]) -> Result<FewShotDataset> {
    let mut cur = Cursor { buf, pos: 0 };
    if buf.len() < MAGIC.len() || buf[..MAGIC.len()] != MAGIC {
        return Err(Error::format(0, "bad magic, not an MGRCLDS1 container"));
    }
    cur.pos = MAGIC.len();
    let num_images = cur.u32("header")? as usize;
    let height = cur.u32("header")? as usize;
    let width = cur.u32("header")? as usize;
    let channels = cur.u32("header")? as usize;
    let num_categories = cur.u32("header")? as usize;
    let split_tag = cur.u32("header")?;
    debug_assert_eq!(cur.pos, HEADER_LEN);
    let split =
        Split::from_tag(split_tag).ok_or_else(|| Error::format(28, format!("unknown split tag {split_tag}")))?;
    if height != width || !matches!(height, 16 | 32) {
        return Err(Error::format(12, format!("unsupported geometry {height}x{width}")));
    }
    if !matches!(channels, 1 | 3) {
        return Err(Error::format(20, format!("unsupported channel count {channels}")));
    }
    let pixel_bytes = height * width * channels;
    let mut images = Vec::with_capacity(num_images.min(buf.len() / (6 + pixel_bytes) + 1));
    for i in 0..num_images {
        let start = cur.pos as u64;
        let what = format!("record {i}");
        let image_id = cur.u32(&what)?;
        let category = cur.u16(&what)? as usize;
        let pixels = cur.take(pixel_bytes, &what)?.to_vec();
        if category >= num_categories {
            return Err(Error::format(
                start + 4,
                format!("category {category} >= {num_categories}"),
            ));
        }
        images.push(LabeledImage {
            pixels,
            channels,
            size: height,
            category,
            image_id,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::format(
            cur.pos as u64,
            format!("{} trailing bytes after the last record", buf.len() - cur.pos),
        ));
    }
    let ds = FewShotDataset {
        images,
        num_categories,
        split,
        size: height,
        channels,
    };
    ds.validate()
        .map_err(|e| Error::format(HEADER_LEN as u64, e.to_string()))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FewShotDataset {
        let images = (0..3)
            .map(|i| LabeledImage {
                pixels: (0..256).map(|p| ((p * 7 + i * 13) % 256) as u8).collect(),
                channels: 1,
                size: 16,
                category: i as usize % 2,
                image_id: 100 + i as u32,
            })
            .collect();
        FewShotDataset::new(images, 2, Split::Novel, 16, 1).unwrap()
    }

    fn encode(ds: &FewShotDataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_to(ds, &mut out).unwrap();
        out
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = encode(&tiny());
        assert_eq!(&bytes[..8], &[0x4D, 0x47, 0x52, 0x43, 0x4C, 0x44, 0x53, 0x31]);
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &16u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &16u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &2u32.to_le_bytes());
        assert_eq!(&bytes[28..32], &1u32.to_le_bytes());
        assert_eq!(&bytes[32..36], &100u32.to_le_bytes());
        assert_eq!(&bytes[36..38], &0u16.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN + 3 * (6 + 256));
    }

    #[test]
    fn round_trip() {
        let ds = tiny();
        assert_eq!(read_from(encode(&ds).as_slice()).unwrap(), ds);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(&tiny());
        bytes[7] = b'2';
        assert!(matches!(
            read_from(bytes.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(read_from(&b"MGR"[..]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncated_record_names_the_offset() {
        let bytes = encode(&tiny());
        let cut = HEADER_LEN + 262 + 100;
        match read_from(&bytes[..cut]) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, (HEADER_LEN + 262 + 6) as u64);
                assert!(message.contains("record 1"), "{message}");
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(&tiny());
        bytes.push(0);
        assert!(matches!(read_from(bytes.as_slice()), Err(Error::Format { .. })));
    }
}
