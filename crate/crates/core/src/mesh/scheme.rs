use std::fmt;

use serde::{Deserialize, Serialize};

use super::MeshError;

/// The (G, P, θ) triple: gateway present, traversal expected, end-to-end
/// encryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeParams {
    #[serde(rename = "G")]
    pub g: u8,
    #[serde(rename = "P")]
    pub p: u8,
    pub theta: u8,
}

impl SchemeParams {
    pub fn new(g: u8, p: u8, theta: u8) -> Result<Self, MeshError> {
        let s = Self { g, p, theta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        for (field, v) in [("G", self.g), ("P", self.p), ("theta", self.theta)] {
            if v > 1 {
                return Err(MeshError::NotBinary { field, value: v });
            }
        }
        Ok(())
    }
}

impl fmt::Display for SchemeParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(G={}, P={}, theta={})", self.g, self.p, self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    PointToSite,
    SiteToSite,
    SiteMesh,
    FullMesh,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::PointToSite,
        SchemeKind::SiteToSite,
        SchemeKind::SiteMesh,
        SchemeKind::FullMesh,
    ];

    pub fn params(&self) -> SchemeParams {
        let (g, p, theta) = match self {
            SchemeKind::PointToSite => (1, 0, 1),
            SchemeKind::SiteToSite => (1, 0, 0),
            SchemeKind::SiteMesh => (1, 1, 1),
            SchemeKind::FullMesh => (0, 1, 1),
        };
        SchemeParams { g, p, theta }
    }

    pub fn encrypted(&self) -> bool {
        self.params().theta == 1
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::PointToSite => "Point-2-Site",
            SchemeKind::SiteToSite => "Site-2-Site",
            SchemeKind::SiteMesh => "Site Mesh",
            SchemeKind::FullMesh => "Full Mesh",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Map a parameter triple to its scheme. The four triples without a scheme
/// are rejected with the closest supported one as a hint.
pub fn classify_scheme(params: SchemeParams) -> Result<SchemeKind, MeshError> {
    params.validate()?;
    if let Some(kind) = SchemeKind::ALL.into_iter().find(|k| k.params() == params) {
        return Ok(kind);
    }
    let distance = |k: &SchemeKind| {
        let q = k.params();
        (q.g != params.g) as u8 + (q.p != params.p) as u8 + (q.theta != params.theta) as u8
    };
    let nearest = SchemeKind::ALL
        .into_iter()
        .min_by_key(distance)
        .expect("four schemes");
    Err(MeshError::UnsupportedCombination { params, nearest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_eight_triples() {
        let mut ok = 0;
        for g in 0..2 {
            for p in 0..2 {
                for t in 0..2 {
                    let params = SchemeParams::new(g, p, t).unwrap();
                    match classify_scheme(params) {
                        Ok(k) => {
                            assert_eq!(k.params(), params);
                            ok += 1;
                        }
                        Err(MeshError::UnsupportedCombination { nearest, .. }) => {
                            let q = nearest.params();
                            let d = (q.g != g) as u8 + (q.p != p) as u8 + (q.theta != t) as u8;
                            assert_eq!(d, 1);
                        }
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
        assert_eq!(ok, 4);
        assert_eq!(classify_scheme(SchemeParams::new(1, 0, 1).unwrap()).unwrap(), SchemeKind::PointToSite);
        assert_eq!(classify_scheme(SchemeParams::new(0, 1, 1).unwrap()).unwrap(), SchemeKind::FullMesh);
        let e = classify_scheme(SchemeParams::new(0, 0, 0).unwrap()).unwrap_err();
        assert!(e.to_string().starts_with("unsupported-combination"), "{e}");
    }

    #[test]
    fn non_binary_rejected() {
        assert!(matches!(
            SchemeParams::new(2, 0, 0),
            Err(MeshError::NotBinary { field: "G", value: 2 })
        ));
        let raw: SchemeParams = serde_json::from_str(r#"{"G":0,"P":1,"theta":3}"#).unwrap();
        assert!(classify_scheme(raw).is_err());
    }
}
