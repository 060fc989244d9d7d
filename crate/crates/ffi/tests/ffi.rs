use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use qarv::codec::{compress, decompress, DecodeMode};
use qarv::image::RgbImage;
use qarv::model::{ModelConfig, Qarv};
use qarv_ffi::*;

fn saved_model(dir: &Path) -> (PathBuf, Qarv<f32>) {
    let model = Qarv::<f32>::new(&ModelConfig::tiny(), 3).unwrap();
    let path = dir.join("m.ckpt");
    model.save(&path).unwrap();
    (path, model)
}

fn load(path: &Path) -> *mut QarvModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { qarv_model_load(c.as_ptr(), true, &mut handle) };
    assert_eq!(status, QarvStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(qarv_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn gradient(w: usize, h: usize) -> Vec<u8> {
    (0..w * h * 3).map(|i| (i * 5 % 251) as u8).collect()
}

fn empty() -> QarvBuffer {
    QarvBuffer {
        data: ptr::null_mut(),
        len: 0,
    }
}

#[test]
fn round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let handle = load(&path);
    let (w, h) = (40usize, 24usize);
    let rgb = gradient(w, h);

    let mut stream = empty();
    let status =
        unsafe { qarv_compress(handle, rgb.as_ptr(), w as u32, h as u32, 300.0, &mut stream) };
    assert_eq!(status, QarvStatus::Ok, "{}", last_error());
    let bytes = unsafe { std::slice::from_raw_parts(stream.data, stream.len) }.to_vec();

    let img = RgbImage::new(w, h, rgb.clone()).unwrap();
    let direct = compress(&model, &img.to_tensor(), 300.0).unwrap();
    assert_eq!(bytes, direct.container.to_bytes().unwrap());

    let mut pixels = empty();
    let (mut ow, mut oh) = (0u32, 0u32);
    let status = unsafe {
        qarv_decompress(
            handle,
            stream.data,
            stream.len,
            QarvDecodeMode::Progressive,
            2,
            &mut pixels,
            &mut ow,
            &mut oh,
        )
    };
    assert_eq!(status, QarvStatus::Ok, "{}", last_error());
    assert_eq!((ow, oh), (w as u32, h as u32));
    let out = unsafe { std::slice::from_raw_parts(pixels.data, pixels.len) }.to_vec();
    let expect = decompress(&model, &direct.container, DecodeMode::Progressive(2)).unwrap();
    assert_eq!(out, RgbImage::from_tensor(&expect.image).unwrap().pixels);

    unsafe {
        qarv_buffer_free(&mut stream);
        qarv_buffer_free(&mut pixels);
        assert!(stream.data.is_null() && stream.len == 0);
        qarv_buffer_free(&mut stream);
        qarv_model_free(handle);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let handle = load(&path);
    let rgb = gradient(16, 16);
    let mut buf = empty();
    unsafe {
        assert_eq!(
            qarv_compress(handle, rgb.as_ptr(), 16, 16, 1e9, &mut buf),
            QarvStatus::LambdaOutOfRange
        );
        assert!(last_error().contains("lambda"));
        assert_eq!(
            qarv_compress(ptr::null(), rgb.as_ptr(), 16, 16, 64.0, &mut buf),
            QarvStatus::NullPointer
        );
        assert_eq!(
            qarv_compress(handle, ptr::null(), 16, 16, 64.0, &mut buf),
            QarvStatus::NullPointer
        );
        assert_eq!(
            qarv_compress(handle, rgb.as_ptr(), 0, 16, 64.0, &mut buf),
            QarvStatus::InvalidArgument
        );
        assert!(buf.data.is_null());

        let junk = b"QARX0000";
        let (mut w, mut h) = (0, 0);
        assert_eq!(
            qarv_decompress(
                handle,
                junk.as_ptr(),
                junk.len(),
                QarvDecodeMode::Full,
                0,
                &mut buf,
                &mut w,
                &mut h
            ),
            QarvStatus::Container
        );

        assert_eq!(
            qarv_compress(handle, rgb.as_ptr(), 16, 16, 64.0, &mut buf),
            QarvStatus::Ok
        );
        assert!(last_error().is_empty());
        let mut px = empty();
        assert_eq!(
            qarv_decompress(
                handle,
                buf.data,
                buf.len,
                QarvDecodeMode::Disjoint,
                9,
                &mut px,
                &mut w,
                &mut h
            ),
            QarvStatus::InvalidArgument
        );
        buf.len -= 1;
        let truncated = qarv_decompress(
            handle,
            buf.data,
            buf.len,
            QarvDecodeMode::Full,
            0,
            &mut px,
            &mut w,
            &mut h,
        );
        assert_eq!(truncated, QarvStatus::Container);
        buf.len += 1;
        qarv_buffer_free(&mut buf);

        let other = Qarv::<f32>::new(
            &ModelConfig {
                lambda_low: 8.0,
                ..ModelConfig::tiny()
            },
            3,
        )
        .unwrap();
        let other_path = dir.path().join("o.ckpt");
        other.save(&other_path).unwrap();
        let other_handle = load(&other_path);
        assert_eq!(
            qarv_compress(other_handle, rgb.as_ptr(), 16, 16, 64.0, &mut buf),
            QarvStatus::Ok
        );
        assert_eq!(
            qarv_decompress(
                handle,
                buf.data,
                buf.len,
                QarvDecodeMode::Full,
                0,
                &mut px,
                &mut w,
                &mut h
            ),
            QarvStatus::ModelMismatch
        );
        qarv_buffer_free(&mut buf);
        qarv_model_free(other_handle);

        let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            qarv_model_load(missing.as_ptr(), true, &mut m),
            QarvStatus::Io
        );
        assert!(m.is_null());
        assert!(last_error().contains("none.ckpt"));
        qarv_model_free(handle);
    }
}

#[test]
fn model_info_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let handle = load(&path);
    let (mut n, mut lo, mut hi) = (0u32, 0.0, 0.0);
    assert_eq!(
        unsafe { qarv_model_info(handle, &mut n, &mut lo, &mut hi) },
        QarvStatus::Ok
    );
    assert_eq!((n, lo, hi), (4, 16.0, 2048.0));
    let v = unsafe { CStr::from_ptr(qarv_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    unsafe { qarv_model_free(handle) };
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    let header = std::fs::read_to_string(header_dir.join("qarv.h")).unwrap();
    for sym in [
        "qarv_model_load",
        "qarv_compress",
        "qarv_decompress",
        "qarv_buffer_free",
        "QARV_STATUS_MODEL_MISMATCH",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
    let lib = target_dir().join("libqarv_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = saved_model(dir.path());
    let exe = dir.path().join("roundtrip");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(manifest.join("tests/c/roundtrip.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("latents=4 range=[16,2048]"));
}
