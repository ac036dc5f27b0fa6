use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Plain-text record of a run: config, per-epoch metrics, artifact hashes
/// and wall-clock time.
///
/// ```text
/// [config]
/// key=value
/// [metrics]
/// epoch,mean_loss,lr
/// 0,1.25,0.01
/// [hashes]
/// student=ab12...
/// [timing]
/// wall_clock_seconds=3.2
/// ```
///
/// Everything but the timing block is deterministic for a fixed config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub config: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
    pub hashes: Vec<(String, String)>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(config: Vec<(String, String)>) -> Self {
        RunManifest {
            config,
            ..Default::default()
        }
    }

    pub fn set_hash(&mut self, name: &str, hash: &str) {
        match self.hashes.iter_mut().find(|(k, _)| k == name) {
            Some(entry) => entry.1 = hash.to_string(),
            None => self.hashes.push((name.to_string(), hash.to_string())),
        }
    }

    pub fn hash(&self, name: &str) -> Option<&str> {
        self.hashes.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// The CSV per-epoch block. Floats use Rust's shortest round-trip form,
    /// so equal runs give equal bytes.
    pub fn metrics_block(&self) -> String {
        let mut s = String::from("epoch,mean_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.mean_loss, e.lr);
        }
        s
    }

    pub fn render(&self) -> String {
        let mut s = String::from("[config]\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "{k}={v}");
        }
        s.push_str("[metrics]\n");
        s.push_str(&self.metrics_block());
        s.push_str("[hashes]\n");
        for (k, v) in &self.hashes {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = write!(s, "[timing]\nwall_clock_seconds={}\n", self.wall_clock_seconds);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        let mut block = "";
        let bad = |line: usize, msg: &str| Error::Config(format!("manifest line {}: {msg}", line + 1));
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                block = match &line[1..line.len() - 1] {
                    b @ ("config" | "metrics" | "hashes" | "timing") => b,
                    _ => return Err(bad(i, "unknown block")),
                };
                continue;
            }
            match block {
                "config" | "hashes" | "timing" => {
                    let (k, v) = line.split_once('=').ok_or_else(|| bad(i, "expected key=value"))?;
                    match block {
                        "config" => m.config.push((k.into(), v.into())),
                        "hashes" => m.hashes.push((k.into(), v.into())),
                        _ if k == "wall_clock_seconds" => {
                            m.wall_clock_seconds = v.parse().map_err(|_| bad(i, "bad number"))?
                        }
                        _ => return Err(bad(i, "unknown timing key")),
                    }
                }
                "metrics" => {
                    if line == "epoch,mean_loss,lr" {
                        continue;
                    }
                    let f: Vec<&str> = line.split(',').collect();
                    if f.len() != 3 {
                        return Err(bad(i, "expected 3 columns"));
                    }
                    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i, "bad number"));
                    m.epochs.push(EpochRecord {
                        epoch: f[0].parse().map_err(|_| bad(i, "bad epoch"))?,
                        mean_loss: num(f[1])?,
                        lr: num(f[2])?,
                    });
                }
                _ => return Err(bad(i, "content outside a block")),
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut m = RunManifest::new(vec![("train.lr0".into(), "0.01".into())]);
        m.epochs = vec![
            EpochRecord { epoch: 0, mean_loss: 1.5, lr: 0.01 },
            EpochRecord { epoch: 1, mean_loss: 0.1 + 0.2, lr: 0.001 },
        ];
        m.set_hash("student", "abc");
        m.set_hash("student", "def");
        m.wall_clock_seconds = 0.25;
        let text = m.render();
        assert!(text.contains("1,0.30000000000000004,0.001\n"));
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
        assert_eq!(m.hash("student"), Some("def"));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(RunManifest::parse("x=1\n").is_err());
        assert!(RunManifest::parse("[metrics]\n1,2\n").is_err());
        assert!(RunManifest::parse("[other]\n").is_err());
    }
}
