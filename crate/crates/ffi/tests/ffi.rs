use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use anylevel::diffusion::{cosine_schedule, ArchSpec, CheckpointHeader, Denoiser, ModelCheckpoint};
use anylevel::features::ToyProvider;
use anylevel::layout::format::to_json;
use anylevel::layout::{BinaryMask, Layout, Region};
use anylevel::scene::SceneSpec;
use anylevel_ffi::*;

fn tiny_checkpoint(dir: &Path) -> CString {
    let spec = SceneSpec::toy(3);
    let arch = ArchSpec { channels: [4, 4, 4], ..ArchSpec::toy(3, 8, 20) };
    let provider = ToyProvider::new(&spec.concept_names(), 8, 0).unwrap();
    let header = CheckpointHeader {
        schedule: cosine_schedule(20),
        vocabulary: provider.vocabulary().clone(),
        admissible_levels: spec.admissible_levels.clone(),
        scene_spec: Some(spec),
        training: None,
        dataset_checksum: None,
        step: 0,
        arch: arch.clone(),
    };
    let params = Denoiser::new(arch).unwrap().random_params(2, 0.1);
    let path = dir.join("tiny.ckpt");
    ModelCheckpoint { header, params }.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        al_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn layout_json(text: &str, x0: usize) -> CString {
    let layout = Layout::new(3, vec![Region::new(BinaryMask::rect(8, x0, 0, x0 + 4, 8), text, 3)]);
    CString::new(to_json(&layout)).unwrap()
}

unsafe fn rgb(image: *const AlImage) -> Vec<u8> {
    let mut needed = 0usize;
    assert_eq!(al_image_rgb8(image, ptr::null_mut(), 0, &mut needed), AlStatus::BufferTooSmall);
    let mut buf = vec![0u8; needed];
    assert_eq!(al_image_rgb8(image, buf.as_mut_ptr(), buf.len(), ptr::null_mut()), AlStatus::Ok);
    buf
}

#[test]
fn load_inspect_sample_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(al_model_load(path.as_ptr(), &mut model), AlStatus::Ok);
        assert_eq!(al_model_side(model), 8);
        assert_eq!(al_model_concept_count(model), 8);
        let mut name = [0 as std::ffi::c_char; 32];
        let mut written = 0;
        assert_eq!(al_model_concept_name(model, 0, name.as_mut_ptr(), name.len(), &mut written), AlStatus::Ok);
        assert_eq!(CStr::from_ptr(name.as_ptr()).to_str().unwrap(), "red circle");
        assert_eq!(written, "red circle".len() + 1);
        assert_eq!(al_model_concept_name(model, 99, name.as_mut_ptr(), name.len(), &mut written), AlStatus::InvalidArgument);

        let json = layout_json("red circle", 0);
        let mut layout = ptr::null_mut();
        assert_eq!(al_layout_from_json(json.as_ptr(), &mut layout), AlStatus::Ok);
        assert_eq!(al_layout_validate(model, layout), AlStatus::Ok);

        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(al_sample(model, layout, -1, 3.0, 4, false, 7, 0, &mut a), AlStatus::Ok);
        assert_eq!(al_sample(model, layout, -1, 3.0, 4, false, 7, 0, &mut b), AlStatus::Ok);
        assert_eq!(al_image_side(a), 8);
        assert_eq!(rgb(a), rgb(b));
        assert_eq!(rgb(a).len(), 3 * 64);

        let png = CString::new(dir.path().join("a.png").to_str().unwrap()).unwrap();
        assert_eq!(al_image_write_png(a, png.as_ptr()), AlStatus::Ok);
        let decoded = anylevel::imageio::read_png(Path::new(png.to_str().unwrap())).unwrap();
        assert_eq!(decoded.width(), 8);

        al_image_free(a);
        al_image_free(b);
        al_layout_free(layout);
        al_model_free(model);
    }
}

#[test]
fn level_zero_ignores_the_masks() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(al_model_load(path.as_ptr(), &mut model), AlStatus::Ok);
        let mut images = Vec::new();
        for x0 in [0, 4] {
            let json = layout_json("blue square", x0);
            let mut layout = ptr::null_mut();
            assert_eq!(al_layout_from_json(json.as_ptr(), &mut layout), AlStatus::Ok);
            let mut img = ptr::null_mut();
            assert_eq!(al_sample(model, layout, 0, 3.0, 4, true, 1, 2, &mut img), AlStatus::Ok);
            images.push(rgb(img));
            al_image_free(img);
            al_layout_free(layout);
        }
        assert_eq!(images[0], images[1]);
        al_model_free(model);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(al_model_load(missing.as_ptr(), &mut model), AlStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert_eq!(al_model_load(ptr::null(), &mut model), AlStatus::NullPointer);
        assert_eq!(al_model_load(path.as_ptr(), ptr::null_mut()), AlStatus::NullPointer);

        assert_eq!(al_model_load(path.as_ptr(), &mut model), AlStatus::Ok);
        let json = layout_json("purple elephant", 0);
        let mut layout = ptr::null_mut();
        assert_eq!(al_layout_from_json(json.as_ptr(), &mut layout), AlStatus::Ok);
        assert_eq!(al_layout_validate(model, layout), AlStatus::InvalidLayout);
        assert!(last_error().contains("purple elephant"), "{}", last_error());
        let mut img = ptr::null_mut();
        assert_eq!(al_sample(model, layout, -1, 3.0, 4, false, 0, 0, &mut img), AlStatus::InvalidLayout);
        assert!(img.is_null());
        al_layout_free(layout);

        let garbage = CString::new("{ not json").unwrap();
        assert_eq!(al_layout_from_json(garbage.as_ptr(), &mut layout), AlStatus::Format);

        let json = layout_json("red circle", 0);
        assert_eq!(al_layout_from_json(json.as_ptr(), &mut layout), AlStatus::Ok);
        assert_eq!(al_sample(model, layout, 2, 3.0, 4, false, 0, 0, &mut img), AlStatus::InvalidArgument);
        assert_eq!(al_sample(model, layout, -1, 3.0, 0, false, 0, 0, &mut img), AlStatus::InvalidArgument);
        assert_eq!(al_sample(model, layout, -1, -1.0, 4, false, 0, 0, &mut img), AlStatus::InvalidArgument);

        let mut tiny = [0 as std::ffi::c_char; 4];
        let n = al_last_error_message(tiny.as_mut_ptr(), tiny.len());
        assert!(n > 3);
        assert_eq!(CStr::from_ptr(tiny.as_ptr()).to_bytes().len(), 3);

        al_layout_free(layout);
        al_model_free(model);
        al_model_free(ptr::null_mut());
    }
    let version = unsafe { CStr::from_ptr(al_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"anylevel.h\"\nint main(void) { AlModel *m = 0; AlStatus s = al_model_load(\"x\", &m); al_model_free(m); return s == AL_STATUS_OK; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let Ok(out) = Command::new(compiler)
            .args(&extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(&header)
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} not available; skipped");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
