//! Output files and run manifests.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Write through a sibling temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path.file_name().ok_or_else(|| {
        io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name")
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// FNV-1a, used to fingerprint model definitions in manifests.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Flat `key = value` sidecar describing one run.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# zmred run manifest\n");
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Named outputs of one run, written together at the end.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, String)>,
    stdout: Option<String>,
}

impl Outputs {
    /// Route to `path`, or to standard output when no path was given.
    pub fn primary(&mut self, path: Option<&Path>, contents: String) {
        match path {
            Some(p) => self.files.push((p.to_path_buf(), contents)),
            None => self.stdout = Some(contents),
        }
    }

    pub fn extra(&mut self, path: &Path, contents: String) {
        self.files.push((path.to_path_buf(), contents));
    }

    /// Write every file plus a `<first output>.manifest` sidecar.
    pub fn commit(self, mut manifest: Manifest) -> io::Result<()> {
        let listed: Vec<String> = self
            .files
            .iter()
            .map(|(p, _)| p.display().to_string())
            .collect();
        manifest.set(
            "outputs",
            if listed.is_empty() {
                "stdout".into()
            } else {
                listed.join(",")
            },
        );
        for (path, contents) in &self.files {
            write_atomic(path, contents)?;
        }
        if let Some((first, _)) = self.files.first() {
            let mut side = first.clone().into_os_string();
            side.push(".manifest");
            write_atomic(Path::new(&side), &manifest.render())?;
        }
        if let Some(text) = self.stdout {
            io::stdout().lock().write_all(text.as_bytes())?;
        }
        Ok(())
    }
}
