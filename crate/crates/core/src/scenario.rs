//! Scenario files: a flat, sectioned key = value format.
//!
//! ```text
//! name = mathieu-two-state
//!
//! [potential]
//! dimension = 1
//! modes = 33
//! preset = mathieu            # free | mathieu | custom (with coeff lines)
//! # coeff = 1 1.0 0.0         # custom: k re im (1D), k1 k2 re im (2D)
//!
//! [states]
//! n_band = 1
//! n_theta = 0/1               # rational p/q or "auto"
//! m_band = 2
//! m_theta = 1/2
//!
//! [drive]
//! kind = scalar               # scalar | em | none
//! q = mathieu
//! g = const 1.5               # const A | gaussian_pulse A t0 st x0 sx | turn_on A ramp
//!
//! [macro]
//! box_length = 8
//! points = 256
//! dt = 1e-3
//! T = 3.0
//!
//! [fine]
//! epsilon = 1/8 1/16 1/32
//! points_per_cell = 16
//!
//! [outputs]
//! dir = out/mathieu-two-state
//! ```
//!
//! Rationals must be written p/q; floats where a rational is required are
//! rejected with the exact form suggested. Scenarios are fully validated
//! before any numerical work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use num_rational::Ratio;

use crate::coupling::MacroFactor;
use crate::error::{Error, Result};
use crate::fine::Envelope;
use crate::grid::{Mode, TorusGrid};
use crate::potential::PeriodicPotential;
use crate::theta::BlochTheta;

#[derive(Clone, Debug, PartialEq)]
pub enum PotentialSpec {
    Free,
    Mathieu,
    Custom(Vec<(Mode, Complex64)>),
}

impl PotentialSpec {
    pub fn build(&self, grid: TorusGrid) -> Result<PeriodicPotential> {
        match self {
            PotentialSpec::Free => Ok(PeriodicPotential::free(grid)),
            PotentialSpec::Mathieu => Ok(PeriodicPotential::mathieu(grid)),
            PotentialSpec::Custom(coeffs) => PeriodicPotential::from_coeffs(grid, coeffs),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ThetaReq {
    Auto,
    Fixed(BlochTheta),
}

#[derive(Clone, Debug)]
pub struct StatesSpec {
    pub n_band: usize,
    pub n_theta: ThetaReq,
    pub m_band: usize,
    pub m_theta: ThetaReq,
    /// θ-grid resolution per dimension for sampling and auto search.
    pub theta_grid: usize,
    /// Number of bands tabulated into bands.csv.
    pub bands: usize,
}

#[derive(Clone, Debug)]
pub enum DriveSpec {
    None,
    Scalar { q: PotentialSpec, g: MacroFactor },
    Em { a_profile: EmProfile, g: MacroFactor },
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmProfile {
    /// Constant vector, one amplitude per dimension.
    Const(Vec<f64>),
    /// 2cos(2πy₁) on the first component, zero elsewhere.
    Mathieu,
}

#[derive(Clone, Debug)]
pub struct MacroSpec {
    pub box_length: f64,
    pub points: usize,
    pub dt: f64,
    pub horizon: f64,
    pub snapshots: usize,
    /// Replace the computed dispersion tensors (1D only): one value per state.
    pub tensors_override: Option<Vec<f64>>,
    pub envelope_center: Vec<f64>,
    pub envelope_sigma: f64,
}

#[derive(Clone, Debug)]
pub struct FineSpec {
    pub eps_list: Vec<Ratio<i64>>,
    pub box_length: i64,
    pub points_per_cell: usize,
    pub dt_safety: f64,
    pub envelope: Envelope,
    pub samples: usize,
    pub with_corrector: bool,
}

/// A fully validated scenario; construction does no numerical work.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    pub modes: usize,
    pub real_points: usize,
    pub potential: PotentialSpec,
    pub states: StatesSpec,
    pub drive: DriveSpec,
    pub macro_spec: MacroSpec,
    pub fine: Option<FineSpec>,
    pub out_dir: PathBuf,
    pub source_bytes: Vec<u8>,
}

impl Scenario {
    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.dim, self.modes, self.real_points)
    }

    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(&self.source_bytes);
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct RawScenario {
    // (section, key) -> (value, line); repeatable keys collect all lines
    scalars: BTreeMap<(String, String), (String, usize)>,
    lists: BTreeMap<(String, String), Vec<(String, usize)>>,
}

const REPEATABLE: &[&str] = &["coeff", "q_coeff"];

fn parse_raw(text: &str) -> Result<RawScenario> {
    let mut scalars = BTreeMap::new();
    let mut lists: BTreeMap<(String, String), Vec<(String, usize)>> = BTreeMap::new();
    let mut section = String::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw_line.split_once('#') {
            Some((head, _)) => head.trim(),
            None => raw_line.trim(),
        };
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(Error::Parse {
                line: line_no,
                msg: format!("malformed section header \"{line}\""),
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: line_no,
            msg: format!("expected key = value, got \"{line}\""),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let id = (section.clone(), key.clone());
        if REPEATABLE.contains(&key.as_str()) {
            lists.entry(id).or_default().push((value, line_no));
        } else if let Some((_, first_line)) = scalars.get(&id) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "duplicate key \"{key}\" in section [{section}] (first set at line {first_line})"
                ),
            });
        } else {
            scalars.insert(id, (value, line_no));
        }
    }
    Ok(RawScenario { scalars, lists })
}

impl RawScenario {
    fn get(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.scalars
            .get(&(section.to_string(), key.to_string()))
            .map(|(v, l)| (v.as_str(), *l))
    }

    fn list(&self, section: &str, key: &str) -> &[(String, usize)] {
        self.lists
            .get(&(section.to_string(), key.to_string()))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("key \"{key}\" in [{section}]: cannot parse \"{v}\""),
            }),
        }
    }

    fn known_keys_check(&self) -> Result<()> {
        const KNOWN: &[(&str, &[&str])] = &[
            ("", &["name"]),
            ("potential", &["dimension", "modes", "real_points", "preset", "coeff"]),
            ("states", &["n_band", "n_theta", "m_band", "m_theta", "theta_grid", "bands"]),
            ("drive", &["kind", "q", "q_coeff", "a_profile", "a_values", "g"]),
            (
                "macro",
                &[
                    "box_length",
                    "points",
                    "dt",
                    "T",
                    "snapshots",
                    "tensors_override",
                    "envelope_center",
                    "envelope_sigma",
                ],
            ),
            (
                "fine",
                &[
                    "epsilon",
                    "box_length",
                    "points_per_cell",
                    "dt_safety",
                    "envelope",
                    "samples",
                    "with_corrector",
                ],
            ),
            ("outputs", &["dir"]),
        ];
        let check = |section: &str, key: &str, line: usize| -> Result<()> {
            let ok = KNOWN
                .iter()
                .any(|(s, keys)| *s == section && keys.contains(&key));
            if ok {
                Ok(())
            } else {
                Err(Error::Parse {
                    line,
                    msg: format!("unknown key \"{key}\" in section [{section}]"),
                })
            }
        };
        for ((section, key), (_, line)) in &self.scalars {
            check(section, key, *line)?;
        }
        for ((section, key), entries) in &self.lists {
            check(section, key, entries[0].1)?;
        }
        Ok(())
    }
}

fn parse_theta_req(raw: &RawScenario, key: &str, dim: usize) -> Result<ThetaReq> {
    match raw.get("states", key) {
        None => Ok(ThetaReq::Auto),
        Some((v, line)) => {
            if v == "auto" {
                return Ok(ThetaReq::Auto);
            }
            let theta: BlochTheta = v.parse().map_err(|e| Error::Parse { line, msg: e })?;
            if theta.dim() != dim {
                return Err(Error::Parse {
                    line,
                    msg: format!("{key} has {} components, expected {dim}", theta.dim()),
                });
            }
            Ok(ThetaReq::Fixed(theta))
        }
    }
}

fn parse_coeff_lines(entries: &[(String, usize)], dim: usize) -> Result<Vec<(Mode, Complex64)>> {
    let mut out = Vec::new();
    for (v, line) in entries {
        let parts: Vec<&str> = v.split_whitespace().collect();
        if parts.len() != dim + 2 {
            return Err(Error::Parse {
                line: *line,
                msg: format!(
                    "coefficient needs {} fields (mode components, re, im), got {}",
                    dim + 2,
                    parts.len()
                ),
            });
        }
        let bad = |what: &str| Error::Parse { line: *line, msg: format!("cannot parse {what} in \"{v}\"") };
        let mut mode = [0i64; crate::grid::MAX_DIM];
        for (j, m) in mode.iter_mut().take(dim).enumerate() {
            *m = parts[j].parse().map_err(|_| bad("mode index"))?;
        }
        let re: f64 = parts[dim].parse().map_err(|_| bad("real part"))?;
        let im: f64 = parts[dim + 1].parse().map_err(|_| bad("imaginary part"))?;
        out.push((mode, Complex64::new(re, im)));
    }
    Ok(out)
}

fn parse_potential_spec(
    raw: &RawScenario,
    section: &str,
    preset_key: &str,
    coeff_key: &str,
    dim: usize,
) -> Result<PotentialSpec> {
    let coeffs = raw.list(section, coeff_key);
    match raw.get(section, preset_key) {
        None => Ok(PotentialSpec::Free),
        Some(("free", _)) => Ok(PotentialSpec::Free),
        Some(("mathieu", _)) => Ok(PotentialSpec::Mathieu),
        Some(("custom", line)) => {
            if coeffs.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("custom potential needs at least one \"{coeff_key}\" line"),
                });
            }
            Ok(PotentialSpec::Custom(parse_coeff_lines(coeffs, dim)?))
        }
        Some((other, line)) => Err(Error::Parse {
            line,
            msg: format!("unknown preset \"{other}\" (free | mathieu | custom)"),
        }),
    }
}

fn parse_macro_factor(raw: &RawScenario, dim: usize) -> Result<MacroFactor> {
    match raw.get("drive", "g") {
        None => Ok(MacroFactor::Const { amplitude: 1.0 }),
        Some((v, line)) => {
            let parts: Vec<&str> = v.split_whitespace().collect();
            let bad = |msg: String| Error::Parse { line, msg };
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| bad(format!("cannot parse number \"{s}\" in g spec")))
            };
            match parts.first().copied() {
                Some("const") if parts.len() == 2 => {
                    Ok(MacroFactor::Const { amplitude: num(parts[1])? })
                }
                // layout: gaussian_pulse A t0 sigma_t x0[dim] sigma_x
                Some("gaussian_pulse") if parts.len() == 5 + dim => {
                    let x0: Result<Vec<f64>> = parts[4..4 + dim].iter().map(|s| num(s)).collect();
                    Ok(MacroFactor::GaussianPulse {
                        amplitude: num(parts[1])?,
                        t0: num(parts[2])?,
                        sigma_t: num(parts[3])?,
                        x0: x0?,
                        sigma_x: num(parts[4 + dim])?,
                    })
                }
                Some("turn_on") if parts.len() == 3 => {
                    Ok(MacroFactor::TurnOn { amplitude: num(parts[1])?, ramp: num(parts[2])? })
                }
                _ => Err(bad(format!(
                    "g must be \"const A\", \"gaussian_pulse A t0 sigma_t x0{} sigma_x\" or \"turn_on A ramp\", got \"{v}\"",
                    if dim == 2 { " y0" } else { "" }
                ))),
            }
        }
    }
}

/// Load and fully validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let source_bytes = std::fs::read(path)?;
    let text = String::from_utf8_lossy(&source_bytes).into_owned();
    let raw = parse_raw(&text)?;
    raw.known_keys_check()?;

    let default_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string());
    let name = raw.get("", "name").map(|(v, _)| v.to_string()).unwrap_or(default_name);

    let dim: usize = raw.parse("potential", "dimension", 1)?;
    if dim == 0 || dim > crate::grid::MAX_DIM {
        return Err(Error::Validation(format!("dimension must be 1 or 2, got {dim}")));
    }
    let modes: usize = raw.parse("potential", "modes", 33)?;
    let real_points: usize = raw.parse("potential", "real_points", 2 * modes)?;
    // validate grid parameters early
    TorusGrid::new(dim, modes, real_points)?;
    let potential = parse_potential_spec(&raw, "potential", "preset", "coeff", dim)?;

    let states = StatesSpec {
        n_band: raw.parse("states", "n_band", 1)?,
        n_theta: parse_theta_req(&raw, "n_theta", dim)?,
        m_band: raw.parse("states", "m_band", 2)?,
        m_theta: parse_theta_req(&raw, "m_theta", dim)?,
        theta_grid: raw.parse("states", "theta_grid", 32)?,
        bands: raw.parse("states", "bands", 5)?,
    };
    if states.n_band == 0 || states.m_band == 0 {
        return Err(Error::Validation("band indices are 1-based".to_string()));
    }
    if states.theta_grid < 8 {
        return Err(Error::Validation("theta_grid must be at least 8".to_string()));
    }
    if states.bands == 0 || states.bands >= modes.pow(dim as u32) {
        return Err(Error::Validation("bands must lie within the basis size".to_string()));
    }
    if states.n_band == states.m_band && states.n_theta == states.m_theta {
        return Err(Error::Validation(
            "states n and m must differ in band or quasi-momentum".to_string(),
        ));
    }

    let g = parse_macro_factor(&raw, dim)?;
    let drive = match raw.get("drive", "kind").map(|(v, l)| (v.to_string(), l)) {
        None => DriveSpec::None,
        Some((kind, line)) => match kind.as_str() {
            "none" => DriveSpec::None,
            "scalar" => {
                let q = parse_potential_spec(&raw, "drive", "q", "q_coeff", dim)?;
                DriveSpec::Scalar { q, g }
            }
            "em" => {
                let a_profile = match raw.get("drive", "a_profile") {
                    None | Some(("const", _)) => {
                        let vals = match raw.get("drive", "a_values") {
                            None => vec![1.0; dim],
                            Some((v, l)) => {
                                let parsed: std::result::Result<Vec<f64>, _> =
                                    v.split_whitespace().map(str::parse).collect();
                                let vals = parsed.map_err(|_| Error::Parse {
                                    line: l,
                                    msg: format!("cannot parse a_values \"{v}\""),
                                })?;
                                if vals.len() != dim {
                                    return Err(Error::Parse {
                                        line: l,
                                        msg: format!("a_values needs {dim} entries"),
                                    });
                                }
                                vals
                            }
                        };
                        EmProfile::Const(vals)
                    }
                    Some(("mathieu", _)) => EmProfile::Mathieu,
                    Some((other, l)) => {
                        return Err(Error::Parse {
                            line: l,
                            msg: format!("unknown a_profile \"{other}\" (const | mathieu)"),
                        })
                    }
                };
                DriveSpec::Em { a_profile, g }
            }
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown drive kind \"{other}\" (scalar | em | none)"),
                })
            }
        },
    };

    let points: usize = raw.parse("macro", "points", 256)?;
    let macro_spec = MacroSpec {
        box_length: raw.parse("macro", "box_length", 8.0)?,
        points,
        dt: raw.parse("macro", "dt", 1e-3)?,
        horizon: raw.parse("macro", "T", 1.0)?,
        snapshots: raw.parse("macro", "snapshots", 0)?,
        tensors_override: match raw.get("macro", "tensors_override") {
            None => None,
            Some(("none", _)) => None,
            Some((v, line)) => {
                if dim != 1 {
                    return Err(Error::Parse {
                        line,
                        msg: "tensors_override is only supported in 1D".to_string(),
                    });
                }
                let parsed: std::result::Result<Vec<f64>, _> =
                    v.split_whitespace().map(str::parse).collect();
                let vals = parsed.map_err(|_| Error::Parse {
                    line,
                    msg: format!("cannot parse tensors_override \"{v}\""),
                })?;
                if vals.len() != 2 {
                    return Err(Error::Parse {
                        line,
                        msg: "tensors_override needs one value per state (2)".to_string(),
                    });
                }
                Some(vals)
            }
        },
        envelope_center: match raw.get("macro", "envelope_center") {
            None => vec![raw.parse("macro", "box_length", 8.0)? / 2.0; dim],
            Some((v, line)) => {
                let parsed: std::result::Result<Vec<f64>, _> =
                    v.split_whitespace().map(str::parse).collect();
                let vals = parsed.map_err(|_| Error::Parse {
                    line,
                    msg: format!("cannot parse envelope_center \"{v}\""),
                })?;
                if vals.len() != dim {
                    return Err(Error::Parse {
                        line,
                        msg: format!("envelope_center needs {dim} entries"),
                    });
                }
                vals
            }
        },
        envelope_sigma: raw.parse("macro", "envelope_sigma", 0.75)?,
    };
    if macro_spec.box_length <= 0.0 || !macro_spec.points.is_power_of_two() {
        return Err(Error::Validation(
            "macro box_length must be positive and points a power of two".to_string(),
        ));
    }
    if macro_spec.dt <= 0.0 || macro_spec.horizon < 0.0 {
        return Err(Error::Validation("macro dt must be positive and T nonnegative".to_string()));
    }

    let fine = if raw.get("fine", "epsilon").is_some() {
        if dim != 1 {
            return Err(Error::Validation("the fine-scale study is 1D only".to_string()));
        }
        let (v, line) = raw.get("fine", "epsilon").unwrap();
        let mut eps_list = Vec::new();
        for tok in v.split_whitespace() {
            let (num, den) = tok.split_once('/').ok_or(Error::Parse {
                line,
                msg: format!("epsilon \"{tok}\" must be a rational like \"1/8\""),
            })?;
            let num: i64 = num.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse epsilon \"{tok}\""),
            })?;
            let den: i64 = den.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse epsilon \"{tok}\""),
            })?;
            if num != 1 || den < 2 {
                return Err(Error::Parse {
                    line,
                    msg: format!("epsilon must be 1/M with M >= 2, got \"{tok}\""),
                });
            }
            eps_list.push(Ratio::new(num, den));
        }
        let envelope = match raw.get("fine", "envelope") {
            None => Envelope::Gaussian {
                center: raw.parse("fine", "box_length", 8i64)? as f64 / 2.0,
                sigma: 0.75,
            },
            Some((v, line)) => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                match parts.first().copied() {
                    Some("uniform") if parts.len() == 1 => Envelope::Uniform,
                    Some("gaussian") if parts.len() == 3 => Envelope::Gaussian {
                        center: parts[1].parse().map_err(|_| Error::Parse {
                            line,
                            msg: format!("cannot parse envelope center in \"{v}\""),
                        })?,
                        sigma: parts[2].parse().map_err(|_| Error::Parse {
                            line,
                            msg: format!("cannot parse envelope sigma in \"{v}\""),
                        })?,
                    },
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!(
                                "envelope must be \"uniform\" or \"gaussian center sigma\", got \"{v}\""
                            ),
                        })
                    }
                }
            }
        };
        let spec = FineSpec {
            eps_list,
            box_length: raw.parse("fine", "box_length", 8)?,
            points_per_cell: raw.parse("fine", "points_per_cell", 16)?,
            dt_safety: raw.parse("fine", "dt_safety", 0.02)?,
            envelope,
            samples: raw.parse("fine", "samples", 64)?,
            with_corrector: raw.parse("fine", "with_corrector", false)?,
        };
        if spec.points_per_cell < 16 {
            return Err(Error::Validation(
                "points_per_cell must be at least 16 in scenario runs".to_string(),
            ));
        }
        if spec.box_length < 1 || spec.samples == 0 {
            return Err(Error::Validation(
                "fine box_length must be >= 1 and samples >= 1".to_string(),
            ));
        }
        // Commensurability is checkable now for fixed thetas.
        for (label, band_theta) in [("n", &states.n_theta), ("m", &states.m_theta)] {
            if let ThetaReq::Fixed(theta) = band_theta {
                for eps in &spec.eps_list {
                    let scale = spec.box_length * eps.denom();
                    let r = theta.components()[0];
                    if (r.numer() * scale) % r.denom() != 0 {
                        return Err(Error::Commensurability {
                            theta: format!("{theta} (state {label})"),
                            scale,
                        });
                    }
                }
            }
        }
        Some(spec)
    } else {
        None
    };

    let out_dir = match raw.get("outputs", "dir") {
        Some((v, _)) => PathBuf::from(v),
        None => PathBuf::from("out").join(&name),
    };

    Ok(Scenario {
        name,
        dim,
        modes,
        real_points,
        potential,
        states,
        drive,
        macro_spec,
        fine,
        out_dir,
        source_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn minimal_free_scenario_fills_defaults() {
        let f = write_tmp("[potential]\npreset = free\n");
        let sc = load_scenario(f.path()).unwrap();
        assert_eq!(sc.dim, 1);
        assert_eq!(sc.modes, 33);
        assert_eq!(sc.real_points, 66);
        assert_eq!(sc.potential, PotentialSpec::Free);
        assert!(matches!(sc.drive, DriveSpec::None));
        assert!(sc.fine.is_none());
        assert_eq!(sc.states.theta_grid, 32);
    }

    #[test]
    fn float_theta_is_rejected_with_suggestion() {
        let f = write_tmp("[states]\nn_theta = 0.25\n");
        let err = load_scenario(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1/4"), "{msg}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let f = write_tmp("[macro]\ndt = 1e-3\ndt = 1e-4\n");
        let err = load_scenario(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_tmp("[macro]\ntypo_key = 3\n");
        let err = load_scenario(f.path()).unwrap_err();
        assert!(err.to_string().contains("typo_key"));
    }

    #[test]
    fn custom_potential_coefficients() {
        let f = write_tmp(
            "[potential]\npreset = custom\ncoeff = 1 0.5 0.25\ncoeff = -1 0.5 -0.25\n",
        );
        let sc = load_scenario(f.path()).unwrap();
        match &sc.potential {
            PotentialSpec::Custom(list) => {
                assert_eq!(list.len(), 2);
                assert_eq!(list[0].0[0], 1);
            }
            other => panic!("expected custom, got {other:?}"),
        }
        // builds into a real potential
        sc.potential.build(sc.grid().unwrap()).unwrap();
    }

    #[test]
    fn incommensurate_fine_theta_fails_early() {
        let f = write_tmp(
            "[states]\nn_band = 1\nn_theta = 1/3\nm_band = 2\nm_theta = 1/2\n[fine]\nepsilon = 1/8\nbox_length = 8\n",
        );
        let err = load_scenario(f.path()).unwrap_err();
        assert!(matches!(err, Error::Commensurability { .. }), "{err}");
    }

    #[test]
    fn gaussian_pulse_drive_parses() {
        let f = write_tmp(
            "[drive]\nkind = scalar\nq = mathieu\ng = gaussian_pulse 1.5 0.5 0.2 4.0 1.0\n",
        );
        let sc = load_scenario(f.path()).unwrap();
        match sc.drive {
            DriveSpec::Scalar { g: MacroFactor::GaussianPulse { amplitude, t0, sigma_t, x0, sigma_x }, .. } => {
                assert_eq!(amplitude, 1.5);
                assert_eq!(t0, 0.5);
                assert_eq!(sigma_t, 0.2);
                assert_eq!(x0, vec![4.0]);
                assert_eq!(sigma_x, 1.0);
            }
            other => panic!("unexpected drive {other:?}"),
        }
    }
}
