use std::path::Path;

use serde::Serialize;
use stackbundle::datagen::{
    gen_galaxy_stack, gen_patch_pairs, gen_sparse_coupled, GalaxyStackSpec, PatchPairSpec, SparseCoupledSpec,
};
use stackbundle::{dstack, Error, Result, Tensor};

pub const SIDECAR: &str = "gen.json";

#[derive(Serialize)]
struct Sidecar<'a, S: Serialize> {
    kind: &'a str,
    spec: &'a S,
    files: Vec<&'a str>,
}

fn write_all<S: Serialize>(out: &Path, kind: &str, spec: &S, files: &[(&str, &Tensor)]) -> Result<Vec<String>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (name, t) in files {
        let p = out.join(name);
        dstack::write_file(&p, t)?;
        written.push(p.display().to_string());
    }
    let sidecar = Sidecar {
        kind,
        spec,
        files: files.iter().map(|(n, _)| *n).collect(),
    };
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join(SIDECAR), text + "\n")?;
    Ok(written)
}

pub fn galaxy(spec: &GalaxyStackSpec, out: &Path) -> Result<Vec<String>> {
    let g = gen_galaxy_stack(spec)?;
    write_all(
        out,
        "galaxy",
        spec,
        &[("y.dstack", &g.y), ("x_true.dstack", &g.x_true), ("psf.dstack", &g.psf)],
    )
}

pub fn patches(spec: &PatchPairSpec, out: &Path) -> Result<Vec<String>> {
    let (s_h, s_l) = gen_patch_pairs(spec)?;
    write_all(out, "patches", spec, &[("s_h.dstack", &s_h), ("s_l.dstack", &s_l)])
}

pub fn coupled(spec: &SparseCoupledSpec, out: &Path) -> Result<Vec<String>> {
    let c = gen_sparse_coupled(spec)?;
    write_all(
        out,
        "coupled",
        spec,
        &[
            ("s_h.dstack", &c.s_h),
            ("s_l.dstack", &c.s_l),
            ("x_h_true.dstack", &c.x_h),
            ("x_l_true.dstack", &c.x_l),
            ("w_true.dstack", &c.w),
        ],
    )
}
