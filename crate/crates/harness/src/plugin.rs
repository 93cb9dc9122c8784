//! External encoder process as a PPRG.
//!
//! The command is run once per text. It gets the text on stdin and a fresh
//! random seed in `VEIL_PPRG_SEED`, and must print a JSON array of rows.

use std::io::Write;
use std::process::{Command, Stdio};

use rand::RngCore;
use veil_core::pprg::{EncodedRepresentation, Pprg};
use veil_core::{Error, Result};

pub const SEED_ENV: &str = "VEIL_PPRG_SEED";

#[derive(Debug, Clone)]
pub struct PluginPprg {
    command: Vec<String>,
    dim: usize,
}

impl PluginPprg {
    pub fn new(command: Vec<String>, dim: usize) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Plugin("empty command".into()));
        }
        Ok(Self { command, dim })
    }
}

impl Pprg for PluginPprg {
    fn encode(&self, text: &str, rng: &mut dyn RngCore) -> Result<EncodedRepresentation> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .env(SEED_ENV, rng.next_u64().to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Plugin(format!("cannot start {}: {e}", self.command[0])))?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(text.as_bytes())
            .map_err(|e| Error::Plugin(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| Error::Plugin(e.to_string()))?;
        if !out.status.success() {
            return Err(Error::Plugin(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let rows: Vec<Vec<f64>> =
            serde_json::from_slice(&out.stdout).map_err(|e| Error::Plugin(format!("bad output: {e}")))?;
        let rep = EncodedRepresentation::new(rows)?;
        if rep.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: rep.dim(),
            });
        }
        Ok(rep)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sh(script: &str, dim: usize) -> PluginPprg {
        PluginPprg::new(vec!["sh".into(), "-c".into(), script.into()], dim).unwrap()
    }

    #[test]
    fn reads_rows_from_stdout() {
        let p = sh("cat >/dev/null; echo '[[1.0, 0.0], [0.5, 0.5]]'", 2);
        let rep = p.encode("a b", &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_eq!(rep.len(), 2);
    }

    #[test]
    fn failures_become_plugin_errors() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(sh("exit 3", 2).encode("a", &mut rng), Err(Error::Plugin(_))));
        assert!(matches!(sh("cat >/dev/null; echo nope", 2).encode("a", &mut rng), Err(Error::Plugin(_))));
        assert!(matches!(
            sh("cat >/dev/null; echo '[[1.0]]'", 2).encode("a", &mut rng),
            Err(Error::Dimension { .. })
        ));
        let missing = PluginPprg::new(vec!["/no/such/encoder".into()], 2).unwrap();
        assert!(matches!(missing.encode("a", &mut rng), Err(Error::Plugin(_))));
    }
}
