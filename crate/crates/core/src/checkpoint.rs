//! Head checkpoints: `[u32 LE header length][JSON header][f32 LE blob]`.
//!
//! The blob holds the parameters in declaration order, then the AdamW first and
//! second moments in the same order, then each hidden layer's running mean and
//! running variance.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{AdamWConfig, AdamWState, HeadConfig, HeadState, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: HeadConfig,
    pub class_names: Vec<String>,
    pub step: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub adam_t: u64,
    pub adam: AdamWConfig,
    pub floats: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub head: HeadState,
    pub opt: AdamWState,
}

fn running_stats(head: &HeadState) -> Vec<&[f64]> {
    head.hidden
        .iter()
        .flat_map(|(_, bn)| [bn.running_mean.as_slice().unwrap(), bn.running_var.as_slice().unwrap()])
        .collect()
}

impl Checkpoint {
    pub fn new(head: &HeadState, opt: &AdamWState, class_names: &[String], step: u64, epoch: usize, config_hash: &str) -> Self {
        let mut head = head.clone();
        head.mode = Mode::Inference;
        Self {
            header: CheckpointHeader {
                architecture: head.config.clone(),
                class_names: class_names.to_vec(),
                step,
                epoch,
                config_hash: config_hash.to_string(),
                adam_t: opt.t,
                adam: opt.config,
                floats: 0,
            },
            head,
            opt: opt.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut blob: Vec<f32> = Vec::new();
        for t in self.head.param_slices() {
            blob.extend(t.iter().map(|&v| v as f32));
        }
        for t in self.opt.m.iter().chain(&self.opt.v) {
            blob.extend(t.iter().map(|&v| v as f32));
        }
        for t in running_stats(&self.head) {
            blob.extend(t.iter().map(|&v| v as f32));
        }
        let header = CheckpointHeader {
            floats: blob.len(),
            ..self.header.clone()
        };
        let head = serde_json::to_vec(&header)?;
        w.write_all(&(head.len() as u32).to_le_bytes())?;
        w.write_all(&head)?;
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut head = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut head)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&head).map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
        let cfg = HeadConfig::new(header.architecture.input_dim, header.architecture.hidden.clone(), header.architecture.classes)?;
        let mut state = HeadState::zeros(cfg);
        let mut opt = AdamWState::new(header.adam, &state);
        opt.t = header.adam_t;

        let params = state.num_params();
        let stats: usize = state.hidden.iter().map(|(_, bn)| 2 * bn.gamma.len()).sum();
        let want = 3 * params + stats;
        if header.floats != want {
            return Err(Error::Data(format!(
                "checkpoint declares {} floats, architecture needs {want}",
                header.floats
            )));
        }
        let mut bytes = vec![0u8; want * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Data(format!("truncated checkpoint blob: {e}")))?;
        let mut vals = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);

        for (p, _) in state.params_mut() {
            p.iter_mut().for_each(|x| *x = vals.next().unwrap());
        }
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            t.iter_mut().for_each(|x| *x = vals.next().unwrap());
        }
        for (_, bn) in state.hidden.iter_mut() {
            bn.running_mean.iter_mut().for_each(|x| *x = vals.next().unwrap());
            bn.running_var.iter_mut().for_each(|x| *x = vals.next().unwrap());
        }
        state.mode = Mode::Inference;
        Ok(Self { header, head: state, opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::Io(e).context(path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(e).context(path.display()))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| e.context(path.display()))
    }
}

/// An all-zero head (every point predicted as class 0).
pub fn zero_head(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<HeadState> {
    let mut h = HeadState::zeros(HeadConfig::new(input_dim, hidden, classes)?);
    h.mode = Mode::Inference;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_at_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = HeadState::init(HeadConfig::new(6, vec![5, 4], 3).unwrap(), &mut rng);
        head.hidden[1].1.running_var[2] = 2.5;
        let mut opt = AdamWState::new(AdamWConfig::default(), &head);
        opt.t = 7;
        opt.m[0][1] = 0.125;
        let ck = Checkpoint::new(&head, &opt, &["a".into(), "b".into(), "c".into()], 12, 3, "abc");
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.header.step, 12);
        assert_eq!(back.header.class_names.len(), 3);
        assert_eq!(back.opt.t, 7);
        assert_eq!(back.opt.m[0][1], 0.125);
        assert_eq!(back.head.hidden[1].1.running_var[2], 2.5);
        for (a, b) in head.param_slices().iter().zip(back.head.param_slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        buf.truncate(buf.len() - 4);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
