use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use lifespan::agecode::AgeClassSchema;
use lifespan::checkpoint::save_checkpoint;
use lifespan::imageio::{from_rgb8, to_rgb8};
use lifespan::inference::Generator;
use lifespan::networks::NetworkConfig;
use lifespan::trainer::{TrainConfig, Trainer};
use lifespan_ffi::*;

fn tiny_checkpoint(dir: &Path) -> (PathBuf, Trainer) {
    let net = NetworkConfig {
        resolution: 16,
        base_channels: 4,
        latent_dim: 8,
        schema: AgeClassSchema::default().with_elements_per_class(2).unwrap(),
    };
    let t = Trainer::new(net, TrainConfig::default(), 1).unwrap();
    let path = dir.join("model.lsck");
    save_checkpoint(&path, &t.checkpoint()).unwrap();
    (path, t)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lifespan_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn load(path: &Path) -> *mut LifespanModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { lifespan_model_load(c.as_ptr(), true, &mut m) };
    assert_eq!(st, LifespanStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn test_image() -> Vec<u8> {
    (0..16 * 16 * 3).map(|i| (i * 37 % 251) as u8).collect()
}

#[test]
fn transform_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, t) = tiny_checkpoint(dir.path());
    let m = load(&path);
    unsafe {
        assert_eq!(lifespan_model_resolution(m), 16);
        assert_eq!(lifespan_model_num_classes(m), 6);
        let (mut lo, mut hi) = (0, 0);
        assert_eq!(lifespan_model_class_range(m, 4, &mut lo, &mut hi), LifespanStatus::Ok);
        assert_eq!((lo, hi), (30, 39));
    }

    let rgb = test_image();
    let mut out = vec![0u8; rgb.len()];
    let st = unsafe { lifespan_transform_class_rgb8(m, rgb.as_ptr(), 16, 16, 5, out.as_mut_ptr()) };
    assert_eq!(st, LifespanStatus::Ok);
    assert!(last_error().is_empty());

    let gen = Generator::new(&t.nets, &t.state.ema);
    let x = from_rgb8(16, 16, &rgb).unwrap();
    let y = gen
        .decode(&gen.identity(&x).unwrap(), &gen.class_latent(5).unwrap())
        .unwrap();
    assert_eq!(to_rgb8(&y).unwrap().2, out);

    // an age inside an anchor is that anchor
    let mut by_age = vec![0u8; rgb.len()];
    let st = unsafe { lifespan_transform_age_rgb8(m, rgb.as_ptr(), 16, 16, 60.0, by_age.as_mut_ptr()) };
    assert_eq!(st, LifespanStatus::Ok);
    assert_eq!(by_age, out);
    let st = unsafe { lifespan_transform_age_rgb8(m, rgb.as_ptr(), 16, 16, 25.0, by_age.as_mut_ptr()) };
    assert_eq!(st, LifespanStatus::Ok);

    unsafe { lifespan_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = tiny_checkpoint(dir.path());
    let m = load(&path);
    let rgb = test_image();
    let mut out = vec![0u8; rgb.len()];
    unsafe {
        let st = lifespan_transform_class_rgb8(m, rgb.as_ptr(), 8, 8, 0, out.as_mut_ptr());
        assert_eq!(st, LifespanStatus::Data);
        assert!(last_error().contains("16×16"));

        let st = lifespan_transform_class_rgb8(m, rgb.as_ptr(), 16, 16, 6, out.as_mut_ptr());
        assert_eq!(st, LifespanStatus::Config);

        let st = lifespan_transform_age_rgb8(m, rgb.as_ptr(), 16, 16, 90.0, out.as_mut_ptr());
        assert_eq!(st, LifespanStatus::Config);
        assert!(!last_error().is_empty());

        let st = lifespan_transform_class_rgb8(ptr::null(), rgb.as_ptr(), 16, 16, 0, out.as_mut_ptr());
        assert_eq!(st, LifespanStatus::InvalidArgument);
        let st = lifespan_transform_class_rgb8(m, ptr::null(), 16, 16, 0, out.as_mut_ptr());
        assert_eq!(st, LifespanStatus::InvalidArgument);
        assert_eq!(lifespan_model_resolution(ptr::null()), 0);
        lifespan_model_free(m);
        lifespan_model_free(ptr::null_mut());
    }

    let mut h = ptr::null_mut();
    let missing = CString::new(dir.path().join("nope.lsck").to_str().unwrap()).unwrap();
    let st = unsafe { lifespan_model_load(missing.as_ptr(), true, &mut h) };
    assert_eq!(st, LifespanStatus::Io);
    assert!(h.is_null());

    let junk = dir.path().join("junk.lsck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    let st = unsafe { lifespan_model_load(junk.as_ptr(), false, &mut h) };
    assert_eq!(st, LifespanStatus::Checkpoint);
    assert!(h.is_null());
    let st = unsafe { lifespan_model_load(ptr::null(), true, &mut h) };
    assert_eq!(st, LifespanStatus::InvalidArgument);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(lifespan_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("lifespan.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "lifespan_model_load",
        "lifespan_transform_class_rgb8",
        "LifespanModel",
        "LIFESPAN_STATUS_OK",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    for (compiler, ext) in [("cc", "c"), ("c++", "cpp")] {
        let src = dir.path().join(format!("use.{ext}"));
        std::fs::write(
            &src,
            "#include \"lifespan.h\"\nint main(void) { LifespanModel *m = 0; return lifespan_model_load(\"x\", 1, &m) == LIFESPAN_STATUS_OK; }\n",
        )
        .unwrap();
        match std::process::Command::new(compiler)
            .arg("-fsyntax-only")
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .output()
        {
            Ok(out) => assert!(
                out.status.success(),
                "{compiler}: {}",
                String::from_utf8_lossy(&out.stderr)
            ),
            Err(_) => eprintln!("{compiler} not found; header syntax not checked"),
        }
    }
}
