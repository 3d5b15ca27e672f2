//! Versioned CSV and JSON artifacts stamped with config hash and seed.

use std::path::Path;

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub name: String,
    pub contents: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config_hash: String,
    pub artifacts: Vec<Artifact>,
    /// Human-readable digest for the terminal.
    pub summary: String,
}

impl RunOutput {
    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        for a in &self.artifacts {
            let path = dir.join(&a.name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
            }
            std::fs::write(&path, &a.contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

/// Stamp carried by every file of one run.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    /// CSV whose first line is `# schema=... config_hash=... seed=...`.
    pub fn csv<R: Serialize>(&self, name: &str, schema: &str, rows: &[R]) -> Result<Artifact, CliError> {
        let mut out = format!(
            "# schema={schema} config_hash={} seed={}\n",
            self.config_hash, self.seed
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in rows {
                w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        Ok(Artifact {
            name: name.to_string(),
            contents: out,
        })
    }

    /// JSON object with `config_hash` and `seed` merged into the top level.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<Artifact, CliError> {
        let mut v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| CliError::Runtime(format!("{name}: top level is not an object")))?;
        obj.insert("config_hash".into(), self.config_hash.clone().into());
        obj.insert("seed".into(), self.seed.into());
        let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        Ok(Artifact {
            name: name.to_string(),
            contents: text.into_bytes(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u32,
        note: String,
    }

    #[test]
    fn csv_header_and_quoting() {
        let s = Stamp {
            config_hash: "abcd".into(),
            seed: 7,
        };
        let a = s
            .csv(
                "x.csv",
                "ftmsec.test.v1",
                &[Row {
                    a: 1,
                    note: "one, two".into(),
                }],
            )
            .unwrap();
        let text = String::from_utf8(a.contents).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# schema=ftmsec.test.v1 config_hash=abcd seed=7");
        assert_eq!(lines[1], "a,note");
        assert_eq!(lines[2], "1,\"one, two\"");
    }

    #[test]
    fn json_is_stamped() {
        let s = Stamp {
            config_hash: "abcd".into(),
            seed: 7,
        };
        let a = s.json("x.json", &serde_json::json!({"k": 1})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&a.contents).unwrap();
        assert_eq!(v["config_hash"], "abcd");
        assert_eq!(v["seed"], 7);
        assert!(s.json("y.json", &[1, 2]).is_err());
    }
}
