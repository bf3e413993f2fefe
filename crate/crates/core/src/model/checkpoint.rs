use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// File signature and format version.
pub const MAGIC: [u8; 8] = *b"3DCC\x00001";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: String,
    config: ModelConfig,
}

pub fn save_checkpoint(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network<f32>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    put_u32(w, bytes.len())?;
    w.write_all(bytes)?;
    Ok(())
}

pub fn write_checkpoint(net: &Network<f32>, w: &mut impl Write) -> Result<()> {
    w.write_all(&MAGIC)?;
    let header = Header {
        arch: net.arch.tag().to_string(),
        config: net.config.clone(),
    };
    put_bytes(w, serde_json::to_string(&header)?.as_bytes())?;
    put_u32(w, net.params.len())?;
    for p in &net.params {
        put_bytes(w, p.name.as_bytes())?;
        put_u32(w, p.value.rank())?;
        for &e in p.value.shape() {
            put_u32(w, e)?;
        }
        let mut buf = Vec::with_capacity(4 * p.value.len());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("checkpoint ends inside {what}")),
        _ => Error::Io(e),
    })
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, what: &str, limit: usize) -> Result<Vec<u8>> {
    let n = get_u32(r, what)?;
    if n > limit {
        return Err(Error::Checkpoint(format!("{what} length {n} exceeds {limit}")));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

/// Reads a checkpoint, rebuilding the layer graph from the stored
/// configuration and checking every parameter name and shape against it.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Network<f32>> {
    let mut magic = [0u8; 8];
    let mut got = 0;
    while got < magic.len() {
        match r.read(&mut magic[got..])? {
            0 => break,
            n => got += n,
        }
    }
    if got == 0 || magic[..got] != MAGIC[..got] {
        return Err(Error::VersionMismatch {
            expected: MAGIC.to_vec(),
            found: magic[..got].to_vec(),
        });
    }
    if got < MAGIC.len() {
        return Err(Error::Truncated("checkpoint ends inside the signature".into()));
    }
    let header = get_bytes(r, "header", 1 << 20)?;
    let header: Header = serde_json::from_slice(&header)?;
    let arch = Arch::from_tag(&header.arch)?;
    let mut net = Network::<f32>::build(&header.config, arch, 0)?;
    let count = get_u32(r, "parameter count")?;
    if count != net.params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, architecture has {}",
            net.params.len()
        )));
    }
    for p in &mut net.params {
        let name = get_bytes(r, "parameter name", 1 << 12)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let rank = get_u32(r, "parameter rank")?;
        let shape = (0..rank)
            .map(|_| get_u32(r, "parameter shape"))
            .collect::<Result<Vec<_>>>()?;
        if shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?}, expected {:?}",
                p.value.shape()
            )));
        }
        let mut buf = vec![0u8; 4 * p.value.len()];
        read_exact(r, &mut buf, &format!("parameter `{name}`"))?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.value = Tensor::from_vec(&shape, data)?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network<f32> {
        Network::build_convcaps(&ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.arch, net.arch);
        for (a, b) in net.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            let (a, b): (Vec<u32>, Vec<u32>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_magic() {
        let net = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        buf[7] = b'2';
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::VersionMismatch { .. })));
        assert!(matches!(read_checkpoint(&mut &b""[..]), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn truncation_detected() {
        let net = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        for cut in [4, 10, buf.len() / 2, buf.len() - 1] {
            let r = read_checkpoint(&mut &buf[..cut]);
            assert!(matches!(r, Err(Error::Truncated(_))), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn unknown_arch() {
        let mut buf = MAGIC.to_vec();
        let header = br#"{"arch":"transformer","config":{}}"#;
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header);
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::UnknownArch(_))));
    }
}
