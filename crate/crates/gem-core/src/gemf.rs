//! GEMF on-disk field format.
//!
//! Layout (all integers little-endian):
//!   magic "GEMF" | u32 version=1 | u32 nlat | u32 nlon | u32 nchan |
//!   u32 ntime | nchan x (u32 len, UTF-8 name) | ntime x i64 time tag |
//!   ntime * nchan * nlat * nlon f32, time-major then channel,
//!   row-major lat then lon.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GemError, Result};
use crate::grid::{make_grid, Field};

pub const GEMF_MAGIC: &[u8; 4] = b"GEMF";
pub const GEMF_VERSION: u32 = 1;

/// Write a sequence of fields sharing one grid and channel list.
pub fn write_field_file<P: AsRef<Path>>(fields: &[Field], path: P) -> Result<()> {
    let first = fields.first().ok_or_else(|| {
        GemError::ShapeMismatch("cannot write an empty field sequence".to_string())
    })?;
    for f in fields {
        if f.grid() != first.grid() {
            return Err(GemError::GridMismatch(
                "fields in one file must share a grid".to_string(),
            ));
        }
        if f.channels() != first.channels() {
            return Err(GemError::ChannelMismatch(
                "fields in one file must share channel names".to_string(),
            ));
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GEMF_MAGIC)?;
    w.write_all(&GEMF_VERSION.to_le_bytes())?;
    w.write_all(&(first.grid().nlat() as u32).to_le_bytes())?;
    w.write_all(&(first.grid().nlon() as u32).to_le_bytes())?;
    w.write_all(&(first.nchan() as u32).to_le_bytes())?;
    w.write_all(&(fields.len() as u32).to_le_bytes())?;
    for name in first.channels() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    for f in fields {
        w.write_all(&f.time_tag().to_le_bytes())?;
    }
    for f in fields {
        for &v in f.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a GEMF file back into a field sequence.
pub fn read_field_file<P: AsRef<Path>>(path: P) -> Result<Vec<Field>> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != GEMF_MAGIC {
        return Err(GemError::BadMagic {
            expected: String::from_utf8_lossy(GEMF_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != GEMF_VERSION {
        return Err(GemError::VersionMismatch {
            expected: GEMF_VERSION,
            found: version,
        });
    }
    let nlat = read_u32(&mut r)? as usize;
    let nlon = read_u32(&mut r)? as usize;
    let nchan = read_u32(&mut r)? as usize;
    let ntime = read_u32(&mut r)? as usize;
    let grid = make_grid(nlat, nlon).map_err(|_| {
        GemError::MalformedHeader(format!("invalid grid dimensions {nlat}x{nlon}"))
    })?;

    let mut channels = Vec::with_capacity(nchan);
    for _ in 0..nchan {
        let len = read_u32(&mut r).map_err(|_| {
            GemError::MalformedHeader(format!(
                "channel name table ended early ({} of {nchan} names read)",
                channels.len()
            ))
        })? as usize;
        if len > 4096 {
            return Err(GemError::MalformedHeader(format!(
                "unreasonable channel name length {len}"
            )));
        }
        let mut buf = vec![0u8; len];
        read_exact(&mut r, &mut buf).map_err(|_| {
            GemError::MalformedHeader(format!(
                "channel name table ended early ({} of {nchan} names read)",
                channels.len()
            ))
        })?;
        let name = String::from_utf8(buf)
            .map_err(|_| GemError::MalformedHeader("channel name is not UTF-8".to_string()))?;
        channels.push(name);
    }

    let mut tags = Vec::with_capacity(ntime);
    for _ in 0..ntime {
        let mut buf = [0u8; 8];
        read_exact(&mut r, &mut buf).map_err(|_| {
            GemError::MalformedHeader("time-tag table ended early".to_string())
        })?;
        tags.push(i64::from_le_bytes(buf));
    }

    let frame = nchan * nlat * nlon;
    let mut payload = vec![0u8; ntime * frame * 4];
    let got = read_fully(&mut r, &mut payload)?;
    if got < payload.len() {
        return Err(GemError::Truncated {
            expected: payload.len(),
            got,
        });
    }

    let mut fields = Vec::with_capacity(ntime);
    for (t, &tag) in tags.iter().enumerate() {
        let mut data = Vec::with_capacity(frame);
        let base = t * frame * 4;
        for k in 0..frame {
            let b = &payload[base + 4 * k..base + 4 * k + 4];
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        fields.push(Field::new(grid.clone(), channels.clone(), data, tag)?);
    }
    Ok(fields)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| GemError::Truncated {
        expected: buf.len(),
        got: 0,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}
