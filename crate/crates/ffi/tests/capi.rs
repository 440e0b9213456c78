use std::ffi::{CStr, CString};
use std::ptr;

use halobit_ffi::*;

fn last_error() -> String {
    let p = hb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn block_roundtrip_through_wire() {
    let data = [0.0, 1.0, 5.0, 5.0, -2.0, 2.0, 0.5, 0.25];
    let mut block = ptr::null_mut();
    unsafe {
        assert_eq!(hb_block_quantize(data.as_ptr(), 2, 4, 1, 3, &mut block), HbStatus::Ok);
        let mut info = HbBlockInfo::default();
        assert_eq!(hb_block_info(block, &mut info), HbStatus::Ok);
        assert_eq!((info.rows, info.dim, info.bits), (2, 4, 1));
        assert_eq!(info.payload_bytes, 2);
        assert_eq!(info.metadata_bytes, 16);
        assert_eq!(info.wire_bytes, 12 + 16 + 2);

        let mut written = 0;
        let mut small = [0u8; 4];
        assert_eq!(hb_block_to_wire(block, small.as_mut_ptr(), small.len(), &mut written), HbStatus::InvalidArgument);
        assert_eq!(written, 30);
        let mut wire = vec![0u8; written];
        assert_eq!(hb_block_to_wire(block, wire.as_mut_ptr(), wire.len(), &mut written), HbStatus::Ok);
        assert_eq!(&wire[..2], &[1, 1]);

        let mut back = ptr::null_mut();
        assert_eq!(hb_block_from_wire(wire.as_ptr(), wire.len(), &mut back), HbStatus::Ok);
        let mut a = [0.0; 8];
        let mut b = [0.0; 8];
        assert_eq!(hb_block_dequantize(block, a.as_mut_ptr(), 8), HbStatus::Ok);
        assert_eq!(hb_block_dequantize(back, b.as_mut_ptr(), 8), HbStatus::Ok);
        assert_eq!(a, b);
        // row 0 has min 0 and scale 5, so every value lands on {0, 5}
        assert!(a[..4].iter().all(|&v| v == 0.0 || v == 5.0));
        assert_eq!(a[2], 5.0);
        hb_block_free(block);
        hb_block_free(back);
    }
}

#[test]
fn passthrough_block_is_exact() {
    let data = [0.1, -3.5, 7.25];
    let mut block = ptr::null_mut();
    let mut out = [0.0; 3];
    unsafe {
        assert_eq!(hb_block_quantize(data.as_ptr(), 1, 3, 32, 0, &mut block), HbStatus::Ok);
        assert_eq!(hb_block_dequantize(block, out.as_mut_ptr(), 3), HbStatus::Ok);
        hb_block_free(block);
    }
    assert_eq!(out, data);
}

#[test]
fn errors_carry_status_and_message() {
    let mut block = ptr::null_mut();
    let data = [1.0, f64::NAN];
    unsafe {
        assert_eq!(hb_block_quantize(data.as_ptr(), 1, 2, 1, 0, &mut block), HbStatus::Codec);
        assert!(block.is_null());
        assert!(last_error().contains("finite"), "{}", last_error());

        assert_eq!(hb_block_quantize(data.as_ptr(), 1, 1, 9, 0, &mut block), HbStatus::Config);
        assert_eq!(hb_block_quantize(ptr::null(), 1, 1, 1, 0, &mut block), HbStatus::NullPointer);
        assert!(last_error().contains("data"));

        let junk = [9u8, 9, 9];
        assert_eq!(hb_block_from_wire(junk.as_ptr(), junk.len(), &mut block), HbStatus::Codec);

        let spec = CString::new("sbm:k=0").unwrap();
        let mut g = ptr::null_mut();
        assert_eq!(hb_graph_sbm(spec.as_ptr(), &mut g), HbStatus::Config);
        let path = CString::new("/definitely/not/here").unwrap();
        assert_eq!(hb_graph_load(path.as_ptr(), &mut g), HbStatus::Load);
        assert!(last_error().contains("meta.json"));
    }
}

#[test]
fn train_through_handles() {
    let spec = CString::new("sbm:k=4,n=25,seed=2").unwrap();
    let mut g = ptr::null_mut();
    let mut cfg = HbRunConfig::default();
    unsafe {
        assert_eq!(hb_graph_sbm(spec.as_ptr(), &mut g), HbStatus::Ok);
        let mut info = HbGraphInfo::default();
        assert_eq!(hb_graph_info(g, &mut info), HbStatus::Ok);
        assert_eq!((info.num_nodes, info.feature_dim, info.num_classes), (100, 32, 4));

        assert_eq!(hb_run_config_default(&mut cfg), HbStatus::Ok);
        cfg.parts = 2;
        cfg.epochs = 6;
        cfg.mode = HbMode::Async;
        cfg.staleness = 3;
        let mut run = ptr::null_mut();
        assert_eq!(hb_run(g, &cfg, &mut run), HbStatus::Ok);
        assert_eq!(hb_run_num_epochs(run), 6);
        let modes: Vec<bool> = (0..6)
            .map(|i| {
                let mut m = HbEpochMetrics::default();
                assert_eq!(hb_run_epoch(run, i, &mut m), HbStatus::Ok);
                assert_eq!(m.epoch, i + 1);
                m.pipelined
            })
            .collect();
        assert_eq!(modes, vec![true, true, false, true, true, false]);
        let mut m = HbEpochMetrics::default();
        assert_eq!(hb_run_epoch(run, 6, &mut m), HbStatus::InvalidArgument);

        let mut json = ptr::null_mut();
        assert_eq!(hb_run_summary_json(run, &mut json), HbStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        hb_string_free(json);
        assert!(text.contains("\"schema_version\": 1"));

        let mut csv = ptr::null_mut();
        assert_eq!(hb_run_metrics_csv(run, &mut csv), HbStatus::Ok);
        assert_eq!(CStr::from_ptr(csv).to_str().unwrap().lines().count(), 7);
        hb_string_free(csv);

        let mut shape = [0usize; 2];
        let mut w = vec![0.0; 32 * 32];
        assert_eq!(hb_run_weights(run, 1, w.as_mut_ptr(), w.len(), shape.as_mut_ptr()), HbStatus::Ok);
        assert_eq!(shape, [32, 32]);
        assert!(w.iter().all(|v| v.is_finite()) && w.iter().any(|&v| v != 0.0));
        assert_eq!(hb_run_weights(run, 3, w.as_mut_ptr(), w.len(), shape.as_mut_ptr()), HbStatus::InvalidArgument);

        hb_run_free(run);
        cfg.bits = 3;
        cfg.parts = 0;
        let mut bad = ptr::null_mut();
        assert_eq!(hb_run(g, &cfg, &mut bad), HbStatus::Config);
        assert!(last_error().contains("--parts"));
        hb_graph_free(g);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        hb_graph_free(ptr::null_mut());
        hb_block_free(ptr::null_mut());
        hb_run_free(ptr::null_mut());
        hb_string_free(ptr::null_mut());
        assert_eq!(hb_run_num_epochs(ptr::null()), 0);
    }
    let v = unsafe { CStr::from_ptr(hb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/halobit.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 18, "{exported:?}");
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct HbRun HbRun;"));
    assert!(header.contains("HB_STATUS_OK = 0"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let dir = tempdir();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"halobit.h\"\nint main(void) { HbRunConfig c; return hb_run_config_default(&c) == HB_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("halobit-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
