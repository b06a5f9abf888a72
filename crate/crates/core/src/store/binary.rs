use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DescriptorSet, ImageId, Keypoints, LocalFeatureSet};
use crate::error::{Error, Result};
use crate::graph::Role;

const DESCRIPTOR_MAGIC: &[u8; 4] = b"GDS1";
const FEATURE_MAGIC: &[u8; 4] = b"GLF1";

/// Reads a GDS1 file. Off-norm rows are renormalized and counted in the log.
pub fn load_descriptors(path: impl AsRef<Path>, role: Role) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let (set, renormalized) = read_descriptors(BufReader::new(file), role)?;
    if renormalized > 0 {
        log::warn!(
            "{}: renormalized {renormalized} of {} descriptors",
            path.display(),
            set.len()
        );
    }
    Ok(set)
}

/// Decodes a GDS1 stream, returning the set and the number of renormalized rows.
pub fn read_descriptors<R: Read>(mut reader: R, role: Role) -> Result<(DescriptorSet, usize)> {
    expect_magic(&mut reader, DESCRIPTOR_MAGIC)?;
    let dim = read_u32(&mut reader, "header dim")? as usize;
    let count = read_u64(&mut reader, "header count")?;
    let mut set = DescriptorSet::new(dim, role)?;
    let mut values = vec![0f32; dim];
    for record in 0..count {
        let id = read_id(&mut reader, record)?;
        read_f32s(&mut reader, &mut values, record)?;
        set.push(id, &values)?;
    }
    expect_eof(&mut reader, count)?;
    let renormalized = set.normalize()?;
    Ok((set, renormalized))
}

pub fn save_descriptors(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_descriptors(set, &mut writer).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_descriptors<W: Write>(set: &DescriptorSet, writer: &mut W) -> io::Result<()> {
    writer.write_all(DESCRIPTOR_MAGIC)?;
    writer.write_all(&(set.dim() as u32).to_le_bytes())?;
    writer.write_all(&(set.len() as u64).to_le_bytes())?;
    for (id, values) in set.iter() {
        write_id(writer, id)?;
        for v in values {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_local_features(path: impl AsRef<Path>) -> Result<LocalFeatureSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_local_features(BufReader::new(file))
}

pub fn read_local_features<R: Read>(mut reader: R) -> Result<LocalFeatureSet> {
    expect_magic(&mut reader, FEATURE_MAGIC)?;
    let dim = read_u32(&mut reader, "header dim")? as usize;
    let count = read_u64(&mut reader, "header image count")?;
    let mut set = LocalFeatureSet::new(dim)?;
    let mut desc = vec![0f32; dim];
    let mut xy = [0f32; 2];
    for record in 0..count {
        let id = read_id(&mut reader, record)?;
        let n = read_u32(&mut reader, "keypoint count")?;
        let mut keypoints = Keypoints::new(dim);
        for _ in 0..n {
            read_f32s(&mut reader, &mut xy, record)?;
            read_f32s(&mut reader, &mut desc, record)?;
            keypoints.push(xy[0], xy[1], &desc)?;
        }
        set.insert(id, keypoints)?;
    }
    expect_eof(&mut reader, count)?;
    Ok(set)
}

pub fn save_local_features(set: &LocalFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_local_features(set, &mut writer).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn write_local_features<W: Write>(set: &LocalFeatureSet, writer: &mut W) -> io::Result<()> {
    writer.write_all(FEATURE_MAGIC)?;
    writer.write_all(&(set.dim() as u32).to_le_bytes())?;
    writer.write_all(&(set.len() as u64).to_le_bytes())?;
    for (id, keypoints) in set.iter() {
        write_id(writer, id)?;
        writer.write_all(&(keypoints.len() as u32).to_le_bytes())?;
        for i in 0..keypoints.len() {
            let [x, y] = keypoints.point(i);
            writer.write_all(&x.to_le_bytes())?;
            writer.write_all(&y.to_le_bytes())?;
            for v in keypoints.desc(i) {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn truncated(what: impl std::fmt::Display) -> Error {
    Error::Corrupt(format!("file truncated while reading {what}"))
}

fn fill<R: Read>(reader: &mut R, buf: &mut [u8], what: impl std::fmt::Display) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => truncated(what),
        _ => Error::Corrupt(format!("read failed ({e}) while reading {what}")),
    })
}

fn expect_magic<R: Read>(reader: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|_| {
        Error::Format(format!("missing magic {:?}", String::from_utf8_lossy(magic)))
    })?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(reader: &mut R, count: u64) -> Result<()> {
    let mut probe = [0u8; 1];
    match reader.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => Err(Error::Corrupt(format!(
            "trailing bytes after the declared {count} records"
        ))),
        Err(e) => Err(Error::Corrupt(format!("read failed: {e}"))),
    }
}

fn read_u16<R: Read>(reader: &mut R, what: impl std::fmt::Display) -> Result<u16> {
    let mut buf = [0u8; 2];
    fill(reader, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(reader: &mut R, what: impl std::fmt::Display) -> Result<u32> {
    let mut buf = [0u8; 4];
    fill(reader, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(reader: &mut R, what: impl std::fmt::Display) -> Result<u64> {
    let mut buf = [0u8; 8];
    fill(reader, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_id<R: Read>(reader: &mut R, record: u64) -> Result<ImageId> {
    let len = read_u16(reader, format_args!("id length of record {record}"))?;
    let mut bytes = vec![0u8; len as usize];
    fill(reader, &mut bytes, format_args!("id of record {record}"))?;
    let token = String::from_utf8(bytes)
        .map_err(|_| Error::validation(format!("id of record {record} is not valid UTF-8")))?;
    ImageId::new(token)
}

fn read_f32s<R: Read>(reader: &mut R, out: &mut [f32], record: u64) -> Result<()> {
    let mut bytes = vec![0u8; out.len() * 4];
    fill(reader, &mut bytes, format_args!("payload of record {record}"))?;
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
    }
    Ok(())
}

fn write_id<W: Write>(writer: &mut W, id: &ImageId) -> io::Result<()> {
    let bytes = id.as_str().as_bytes();
    let len = u16::try_from(bytes.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("id {id} longer than 65535 bytes")))?;
    writer.write_all(&len.to_le_bytes())?;
    writer.write_all(bytes)
}
