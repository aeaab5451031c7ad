//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "F4CACKPT" | format_version u64 | config snapshot (u64 len + UTF-8)
//! leaf count u64 | per leaf: name, group name (u64 len + UTF-8), trainable u8,
//!     inference u8, rank u64, dims u64 * rank, values f32 bits * numel
//! train state: step u64, rng seed [u8; 32], rng stream u64, rng word pos u128,
//!     order (u64 len + u64 *), cursor u64, averages (det, align, aux, total) f64 bits,
//!     velocity count u64, per leaf (u64 len + f32 bits *)
//! SHA-256 of every preceding byte
//! ```
//!
//! Leaves appear in store order, which is model construction order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::pipeline::{LossBundle, TrainState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"F4CACKPT";
pub const FORMAT_VERSION: u64 = 1;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub store: ParamStore<f32>,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u64(FORMAT_VERSION);
    w.bytes(ck.config.as_bytes());
    w.u64(ck.store.len() as u64);
    for l in ck.store.leaves() {
        w.bytes(l.name.as_bytes());
        w.bytes(l.group.name().as_bytes());
        w.0.push(l.trainable as u8);
        w.0.push(l.inference as u8);
        w.u64(l.value.shape().len() as u64);
        for &d in l.value.shape() {
            w.u64(d as u64);
        }
        w.f32s(l.value.data());
    }
    let s = &ck.state;
    w.u64(s.step);
    w.0.extend_from_slice(&s.rng.get_seed());
    w.u64(s.rng.get_stream());
    w.0.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
    w.u64(s.order.len() as u64);
    for &i in &s.order {
        w.u64(i as u64);
    }
    w.u64(s.cursor as u64);
    for v in [s.average.det, s.average.align, s.average.aux, s.average.total] {
        w.u64(v.to_bits());
    }
    w.u64(s.velocity.len() as u64);
    for v in &s.velocity {
        w.u64(v.len() as u64);
        w.f32s(v);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::corrupt(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // Every counted element takes at least one byte.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::corrupt(
                self.path,
                format!("{what} length {n} exceeds file size"),
            ));
        }
        Ok(n as usize)
    }
    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::corrupt(self.path, format!("{what} is not UTF-8")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::corrupt(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::corrupt(self.path, format!("bad flag byte {b}"))),
        }
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 + HASH_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::corrupt(path, "not a checkpoint (bad magic or too short)"));
    }
    let version = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::corrupt(path, "content hash mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: 16,
        path,
    };
    let config = r.string("config")?;
    let n = r.len("leaf count")?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string("leaf name")?;
        let gname = r.string("group")?;
        let group = Group::from_name(&gname).ok_or_else(|| Error::corrupt(path, format!("unknown group {gname:?}")))?;
        let trainable = r.flag()?;
        let inference = r.flag()?;
        let rank = r.len("rank")?;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::corrupt(path, "leaf size overflow"))?;
        let value = Tensor::from_vec(&shape, r.f32s(numel)?)?;
        if store.find(&name).is_some() {
            return Err(Error::corrupt(path, format!("duplicate leaf {name}")));
        }
        let id = store.add(name, group, value);
        let leaf = store.leaf_mut(id);
        leaf.trainable = trainable;
        leaf.inference = inference;
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n_order = r.len("order")?;
    let order = (0..n_order)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let cursor = r.u64()? as usize;
    let mut avg = [0.0; 4];
    for a in &mut avg {
        *a = f64::from_bits(r.u64()?);
    }
    let n_vel = r.len("velocity count")?;
    let mut velocity = Vec::with_capacity(n_vel);
    for _ in 0..n_vel {
        let len = r.len("velocity")?;
        velocity.push(r.f32s(len)?);
    }
    if r.pos != body.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok(Checkpoint {
        config,
        store,
        state: TrainState {
            step,
            velocity,
            rng,
            order,
            cursor,
            average: LossBundle {
                det: avg[0],
                align: avg[1],
                aux: avg[2],
                total: avg[3],
            },
        },
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Copies checkpoint leaves into a freshly built store, checking that names,
/// groups and shapes agree leaf for leaf.
pub fn restore_into(path: &Path, ck: &ParamStore<f32>, store: &mut ParamStore<f32>) -> Result<()> {
    if ck.len() != store.len() {
        return Err(Error::corrupt(
            path,
            format!("checkpoint has {} leaves, model expects {}", ck.len(), store.len()),
        ));
    }
    for (a, b) in ck.leaves().iter().zip(store.leaves()) {
        if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
            return Err(Error::corrupt(
                path,
                format!(
                    "leaf {} {:?} does not match model leaf {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ),
            ));
        }
    }
    *store = ck.clone();
    Ok(())
}

/// Copies every checkpoint leaf whose name and shape match a model leaf;
/// returns how many were copied. Other model leaves keep their init.
pub fn warm_start(ck: &ParamStore<f32>, store: &mut ParamStore<f32>) -> usize {
    let mut copied = 0;
    for l in ck.leaves() {
        if let Some(id) = store.find(&l.name) {
            if store.value(id).shape() == l.value.shape() {
                *store.value_mut(id) = l.value.clone();
                copied += 1;
            }
        }
    }
    copied
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::pipeline::{Model, ModelConfig};

    fn sample() -> Checkpoint {
        let run = RunConfig::default();
        let (_, mut store) = Model::new::<f32>(&ModelConfig::from_run(&run).unwrap()).unwrap();
        store.set_trainable(crate::params::ParamId(0), false);
        let mut state = TrainState::new(9, store.len());
        state.next_batch(10, 3).unwrap();
        state.step = 17;
        state.velocity[2] = vec![0.5, -0.0, f32::MIN_POSITIVE];
        state.average.total = 1.0 / 3.0;
        Checkpoint {
            config: run.snapshot(),
            store,
            state,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = encode(&ck);
        let back = decode(Path::new("x"), &bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back), bytes);
        let mut a = ck.state.clone();
        let mut b = back.state.clone();
        assert_eq!(a.next_batch(10, 3).unwrap(), b.next_batch(10, 3).unwrap());
    }

    #[test]
    fn warm_start_copies_matching_leaves() {
        let run = RunConfig::default();
        let mut bare = run.clone();
        bare.set("adapter.enabled", "false").unwrap();
        bare.set("model.seed", "5").unwrap();
        let (_, src) = Model::new::<f32>(&ModelConfig::from_run(&bare).unwrap()).unwrap();
        let (_, mut dst) = Model::new::<f32>(&ModelConfig::from_run(&run).unwrap()).unwrap();
        let fresh = dst.clone();
        assert_eq!(warm_start(&src, &mut dst), src.len());
        for l in dst.leaves() {
            match src.find(&l.name) {
                Some(id) => assert_eq!(&l.value, src.value(id)),
                None => assert_eq!(l.value, fresh.value(fresh.find(&l.name).unwrap()).clone()),
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&sample());
        let p = Path::new("x");
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(p, &flipped), Err(Error::Corrupt { .. })));
        assert!(matches!(
            decode(p, &bytes[..bytes.len() - 1]),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(decode(p, b"nonsense"), Err(Error::Corrupt { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode(p, &v2), Err(Error::Version { found: 2, .. })));
    }
}
