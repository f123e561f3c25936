//! Plain-text checkpoint files.
//!
//! ```text
//! lexdiff-checkpoint 1
//! arch.series_len = 64
//! ...                          header, one `key = value` per line
//! params
//! tensor layer0.weight 86 128  name followed by its shape
//! 1.5e-2 -3e-1 ...             row-major values on one line
//! ...
//! end
//! ```
//!
//! Values are written in shortest round-trip form, so a load reproduces the
//! saved parameters bit for bit. See `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::network::{Activation, Arch, NoiseModel, ScoreNetwork};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &str = "lexdiff-checkpoint 1";

const RESERVED: [&str; 10] = [
    "arch.series_len",
    "arch.cond_dim",
    "arch.time_dim",
    "arch.hidden",
    "arch.activation",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "stage",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ScoreNetwork,
    pub schedule: NoiseSchedule,
    pub stage: String,
    pub seed: u64,
    /// Additional header entries (mode, recorded losses, encoder bins...).
    pub extra: BTreeMap<String, String>,
}

fn data_err(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

impl Checkpoint {
    pub fn new(
        net: ScoreNetwork,
        schedule: NoiseSchedule,
        stage: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            net,
            schedule,
            stage: stage.into(),
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.extra.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_text(&self) -> Result<String> {
        let arch = self.net.arch();
        let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
        let mut out = String::new();
        let mut header = vec![
            ("arch.series_len".to_string(), arch.series_len.to_string()),
            ("arch.cond_dim".to_string(), arch.cond_dim.to_string()),
            ("arch.time_dim".to_string(), arch.time_dim.to_string()),
            ("arch.hidden".to_string(), hidden.join(",")),
            (
                "arch.activation".to_string(),
                arch.activation.name().to_string(),
            ),
            (
                "schedule.steps".to_string(),
                self.schedule.steps().to_string(),
            ),
            (
                "schedule.beta_start".to_string(),
                format!("{:e}", self.schedule.beta_start()),
            ),
            (
                "schedule.beta_end".to_string(),
                format!("{:e}", self.schedule.beta_end()),
            ),
            ("stage".to_string(), self.stage.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        for (k, v) in &self.extra {
            if RESERVED.contains(&k.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "header key {k:?} is reserved"
                )));
            }
            header.push((k.clone(), v.clone()));
        }
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in header {
            if k.contains(['=', '\n']) || k.trim() != k || v.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "header entry {k:?} cannot be written"
                )));
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("params\n");
        for (name, t) in self.net.params().iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(data_err("not a checkpoint file"));
        }
        let mut header = BTreeMap::new();
        loop {
            let line = lines.next().ok_or_else(|| data_err("truncated header"))?;
            if line == "params" {
                break;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| data_err(format!("bad header line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| {
            header
                .remove(k)
                .ok_or_else(|| data_err(format!("missing header key {k}")))
        };
        let num = |k: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| data_err(format!("{k} is not an integer")))
        };
        let float = |k: &str, v: String| {
            v.parse::<f64>()
                .map_err(|_| data_err(format!("{k} is not a number")))
        };
        let series_len = num("arch.series_len", take("arch.series_len")?)?;
        let cond_dim = num("arch.cond_dim", take("arch.cond_dim")?)?;
        let time_dim = num("arch.time_dim", take("arch.time_dim")?)?;
        let hidden = take("arch.hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| data_err("arch.hidden is not a list of integers"))
            })
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::parse(&take("arch.activation")?)?;
        let steps = num("schedule.steps", take("schedule.steps")?)?;
        let beta_start = float("schedule.beta_start", take("schedule.beta_start")?)?;
        let beta_end = float("schedule.beta_end", take("schedule.beta_end")?)?;
        let stage = take("stage")?;
        let seed = take("seed")?
            .parse::<u64>()
            .map_err(|_| data_err("seed is not an integer"))?;

        let mut params = ParamSet::new();
        loop {
            let line = lines
                .next()
                .ok_or_else(|| data_err("missing `end` marker"))?;
            if line == "end" {
                break;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(data_err(format!("expected tensor line, got {line:?}")));
            }
            let name = parts
                .next()
                .ok_or_else(|| data_err("tensor line without a name"))?;
            let shape = parts
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| data_err(format!("bad shape for {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let values = lines
                .next()
                .ok_or_else(|| data_err(format!("missing values for {name}")))?
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| data_err(format!("bad value in {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, values)?)?;
        }
        let arch = Arch {
            series_len,
            cond_dim,
            time_dim,
            hidden,
            activation,
        };
        Ok(Self {
            net: ScoreNetwork::from_parts(arch, params)?,
            schedule: NoiseSchedule::linear(steps, beta_start, beta_end)?,
            stage,
            seed,
            extra: header,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| data_err(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Arch {
            series_len: 5,
            cond_dim: 6,
            time_dim: 4,
            hidden: vec![7, 3],
            activation: Activation::Silu,
        };
        let net = ScoreNetwork::init(arch, &mut rng).unwrap();
        let flat: Vec<f64> = (0..net.params().num_scalars())
            .map(|_| rng.random::<f64>() * 1e-3 - 3e2 * rng.random::<f64>())
            .collect();
        let net = net
            .with_params(net.params().unflatten(&flat).unwrap())
            .unwrap();
        let mut ck = Checkpoint::new(
            net,
            NoiseSchedule::linear(7, 1e-4, 0.1).unwrap(),
            "pretrain",
            42,
        );
        ck.set("final_loss", 0.123);
        ck.set("mode", "text2data");
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample_checkpoint();
        let text = ck.to_text().unwrap();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text().unwrap(), text);
        assert_eq!(back.get_f64("final_loss"), Some(0.123));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample_checkpoint();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let text = sample_checkpoint().to_text().unwrap();
        assert!(matches!(Checkpoint::parse("hello"), Err(Error::Data(_))));
        let truncated: String = text.lines().take(14).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::parse(&truncated).is_err());
        let broken = text.replace("arch.cond_dim = 6", "arch.cond_dim = six");
        assert!(matches!(Checkpoint::parse(&broken), Err(Error::Data(_))));
    }

    #[test]
    fn reserved_keys_cannot_be_overridden() {
        let mut ck = sample_checkpoint();
        ck.set("seed", 1);
        assert!(ck.to_text().is_err());
    }
}
