use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Camera, Dataset, Image, Split, View};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "nerf-id-dataset v1";
const FIELDS: usize = 18;

/// Writes `manifest.txt` plus one PPM per view under its split directory.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut manifest = format!(
        "{MANIFEST_HEADER}\n# filename focal cx cy r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 near far\n"
    );
    for split in Split::ALL {
        let views = dataset.split(split);
        if !views.is_empty() {
            std::fs::create_dir_all(dir.join(split.as_str()))?;
        }
        for v in views {
            if split_of(&v.name) != Some(split) {
                return Err(Error::Invalid(format!("view `{}` is not under `{}/`", v.name, split.as_str())));
            }
            v.image.write_ppm(&dir.join(&v.name))?;
            let c = &v.camera;
            write!(manifest, "{} {} {} {}", v.name, c.focal, c.cx, c.cy).unwrap();
            for row in &c.pose {
                for x in row {
                    write!(manifest, " {x}").unwrap();
                }
            }
            writeln!(manifest, " {} {}", v.near, v.far).unwrap();
        }
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

fn split_of(name: &str) -> Option<Split> {
    let first = Path::new(name).components().next()?.as_os_str().to_str()?;
    first.parse().ok()
}

/// Loads a directory written by [`save_dataset`] or laid out the same way.
pub fn load_posed_images(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_NAME);
    if !path.is_file() {
        return Err(Error::NoManifest(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(&path)?;
    let err = |line: usize, msg: String| Error::Parse { path: path.clone(), line, msg };

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some((_, MANIFEST_HEADER)) => {}
        Some((n, other)) => return Err(err(n, format!("expected header `{MANIFEST_HEADER}`, found `{other}`"))),
        None => return Err(err(1, "empty manifest".into())),
    }

    let mut dataset = Dataset::default();
    for (n, line) in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != FIELDS {
            return Err(err(n, format!("expected {FIELDS} fields, found {}", tokens.len())));
        }
        let name = tokens[0];
        let split = split_of(name).ok_or_else(|| err(n, format!("`{name}` is not under train/, val/ or test/")))?;
        let nums = tokens[1..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(n, format!("bad number `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let mut pose = [[0.0; 4]; 3];
        for (r, row) in pose.iter_mut().enumerate() {
            row.copy_from_slice(&nums[3 + 4 * r..7 + 4 * r]);
        }
        let file = dir.join(name);
        if !file.is_file() {
            return Err(Error::MissingFile(file));
        }
        let image = Image::read_ppm(&file)?;
        let camera = Camera::new(nums[0], nums[1], nums[2], image.width(), image.height(), pose)
            .map_err(|e| err(n, e.to_string()))?;
        let (near, far) = (nums[15], nums[16]);
        if !(near < far) {
            return Err(err(n, format!("near {near} must be below far {far}")));
        }
        dataset.split_mut(split).push(View { name: name.to_string(), camera, near, far, image });
    }

    let listed: usize = Split::ALL.iter().map(|&s| dataset.split(s).len()).sum();
    let on_disk = count_images(dir)?;
    if listed != on_disk {
        return Err(Error::Invalid(format!(
            "{} lists {listed} posed images but {on_disk} .ppm files exist",
            path.display()
        )));
    }
    Ok(dataset)
}

fn count_images(dir: &Path) -> Result<usize> {
    let mut count = 0;
    for split in Split::ALL {
        let sub: PathBuf = dir.join(split.as_str());
        if !sub.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(sub)? {
            if entry?.path().extension().is_some_and(|e| e == "ppm") {
                count += 1;
            }
        }
    }
    Ok(count)
}
