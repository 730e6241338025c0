//! Parsers for the compound command-line values.

use zmred::SystemSpec;

/// A usage error: reported with exit code 2 before anything is written.
#[derive(Debug)]
pub struct Usage(pub String);

impl<E: std::fmt::Display> From<E> for Usage {
    fn from(e: E) -> Self {
        Usage(e.to_string())
    }
}

fn number(text: &str, what: &str) -> Result<f64, Usage> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| Usage(format!("{what}: `{}` is not a number", text.trim())))?;
    if !v.is_finite() {
        return Err(Usage(format!("{what}: `{}` is not finite", text.trim())));
    }
    Ok(v)
}

/// `name=value,name=value`; an empty string yields no pairs.
pub fn assignments(text: &str, what: &str) -> Result<Vec<(String, f64)>, Usage> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Usage(format!("{what}: expected name=value, got `{item}`")))?;
        let k = k.trim().to_string();
        if out.iter().any(|(n, _)| *n == k) {
            return Err(Usage(format!("{what}: `{k}` given twice")));
        }
        out.push((k, number(v, what)?));
    }
    Ok(out)
}

/// `lo:hi` with `lo < hi`.
pub fn range(text: &str, what: &str) -> Result<(f64, f64), Usage> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| Usage(format!("{what}: expected lo:hi, got `{text}`")))?;
    let (lo, hi) = (number(lo, what)?, number(hi, what)?);
    if lo >= hi {
        return Err(Usage(format!("{what}: need lo < hi, got {lo}:{hi}")));
    }
    Ok((lo, hi))
}

/// Comma- or whitespace-separated numbers.
pub fn numbers(text: &str, what: &str) -> Result<Vec<f64>, Usage> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| number(s, what))
        .collect()
}

/// Comma-separated names.
pub fn names(text: &str) -> Vec<String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Initial subnetwork state: the model's default point overridden by `--ic`.
pub fn initial_state(spec: &SystemSpec, ic: &str) -> Result<Vec<f64>, Usage> {
    let part = spec.partition();
    let mut x = part.gather_sub(spec.default_point());
    for (name, v) in assignments(ic, "--ic")? {
        let k = spec.species_index(&name)?;
        let slot = part.sub().iter().position(|&s| s == k).ok_or_else(|| {
            Usage(format!(
                "--ic: `{name}` is a bulk species; bulk starts on its QSS"
            ))
        })?;
        x[slot] = v;
    }
    Ok(x)
}

/// Two subnetwork species for a grid, as positions within the subnetwork.
pub fn axes(spec: &SystemSpec, text: Option<&str>) -> Result<(usize, usize), Usage> {
    if spec.n_sub() != 2 {
        return Err(Usage(format!(
            "grid maps need a two-species subnetwork; `{}` has {}",
            spec.id(),
            spec.n_sub()
        )));
    }
    let Some(text) = text else {
        return Ok((0, 1));
    };
    let list = names(text);
    if list.len() != 2 {
        return Err(Usage(format!("--axes: expected two species, got `{text}`")));
    }
    let sub = spec.sub_names();
    let pos = |n: &str| {
        sub.iter()
            .position(|s| *s == n)
            .ok_or_else(|| Usage(format!("--axes: `{n}` is not a subnetwork species")))
    };
    let (x, y) = (pos(&list[0])?, pos(&list[1])?);
    if x == y {
        return Err(Usage("--axes: the two axes must differ".into()));
    }
    Ok((x, y))
}

/// Per-axis ranges from `name=lo:hi,name=lo:hi`; unnamed axes use the model box.
pub fn axis_ranges(
    spec: &SystemSpec,
    axes: (usize, usize),
    text: Option<&str>,
) -> Result<((f64, f64), (f64, f64)), Usage> {
    let part = spec.partition();
    let names = spec.sub_names();
    let mut ranges = [
        spec.phys_box()[part.sub()[axes.0]],
        spec.phys_box()[part.sub()[axes.1]],
    ];
    for item in text
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
    {
        let (name, r) = item
            .split_once('=')
            .ok_or_else(|| Usage(format!("--range: expected name=lo:hi, got `{item}`")))?;
        let slot = [axes.0, axes.1]
            .iter()
            .position(|&a| names[a] == name.trim())
            .ok_or_else(|| Usage(format!("--range: `{}` is not a grid axis", name.trim())))?;
        ranges[slot] = range(r, "--range")?;
    }
    Ok((ranges[0], ranges[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_lists() {
        let a = assignments(" x1=1.4, x2 = 0 ", "t").unwrap();
        assert_eq!(a, vec![("x1".to_string(), 1.4), ("x2".to_string(), 0.0)]);
        assert!(assignments("x1", "t").is_err());
        assert!(assignments("x1=a", "t").is_err());
        assert!(assignments("x1=1,x1=2", "t").is_err());
        assert!(assignments("", "t").unwrap().is_empty());
    }

    #[test]
    fn ranges_and_numbers() {
        assert_eq!(range("1:20", "t").unwrap(), (1.0, 20.0));
        assert!(range("2:1", "t").is_err());
        assert!(range("1", "t").is_err());
        assert_eq!(numbers("1, 2 3", "t").unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(numbers("1,inf", "t").is_err());
    }

    #[test]
    fn initial_states() {
        let s = zmred::zoo::zoo("neuraltube", &[]).unwrap();
        assert_eq!(
            initial_state(&s, "Nkx2.2=0,Olig2=0").unwrap(),
            vec![0.0, 0.0]
        );
        assert!(initial_state(&s, "Pax6=1").is_err());
        assert!(initial_state(&s, "Shh=1").is_err());
    }
}
