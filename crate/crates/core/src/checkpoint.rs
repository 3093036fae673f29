//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "MFLW"
//! version  u32
//! records  repeated until end of file:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rank      u32
//!   dims      rank x u64
//!   payload   prod(dims) x f64
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"MFLW";
pub const VERSION: u32 = 1;

pub fn write_records<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn format_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated container: {e}"))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(format_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(format_err)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut out = Vec::new();
    while read_exact_or_eof(&mut r, &mut word).map_err(format_err)? {
        let name_len = u32::from_le_bytes(word) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(format_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        r.read_exact(&mut word).map_err(format_err)?;
        let rank = u32::from_le_bytes(word) as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut long = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut long).map_err(format_err)?;
            dims.push(u64::from_le_bytes(long) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut long).map_err(format_err)?;
            data.push(f64::from_le_bytes(long));
        }
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_records(BufWriter::new(file), records).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, [("w", &t)]).unwrap();
        assert_eq!(&buf[..4], b"MFLW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'w');
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..25], &2u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 41);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_records(buf.as_slice()),
            Err(Error::Version { found: 7, .. })
        ));
        assert!(matches!(
            read_records(&b"NOPE\x01\0\0\0"[..]),
            Err(Error::Format(_))
        ));
        let t = Tensor::zeros(vec![3]);
        let mut ok = Vec::new();
        write_records(&mut ok, [("x", &t)]).unwrap();
        ok.truncate(ok.len() - 3);
        assert!(read_records(ok.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .map(|v| if v.is_finite() { v } else { 0.5 })
                .collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let s = Tensor::scalar(-0.0);
            let mut buf = Vec::new();
            write_records(&mut buf, [("a/b", &t), ("scalar", &s)]).unwrap();
            let back = read_records(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "a/b");
            prop_assert_eq!(back[0].1.shape(), t.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back[0].1), bits(&t));
            prop_assert_eq!(bits(&back[1].1), bits(&s));
        }
    }
}
