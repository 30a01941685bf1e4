mod common;

use common::*;
use tristage::dataio::{encode_binary, load_csv, load_schema, save_csv, summarize, ColumnRole};
use tristage::preprocess::{impute_zero_median, iqr_filter, stratified_split};
use tristage::Error;

#[test]
fn csv_survives_save_and_reload() {
    let ws = Workspace::new();
    let data = ws.write("d.csv", &stage1_csv(40, 2));
    let schema = load_schema(ws.write("s.json", STAGE1_SCHEMA)).unwrap();
    let ds = encode_binary(&load_csv(&data, &schema).unwrap()).unwrap();
    let copy = ws.path().join("copy.csv");
    save_csv(&ds, &copy).unwrap();
    let back = encode_binary(&load_csv(&copy, &ds.schema()).unwrap()).unwrap();
    assert_eq!(back.columns(), ds.columns());
    let summary = summarize(&ds);
    assert_eq!(summary.n_rows, 40);
    assert!(summary.class_balance.is_some());
}

#[test]
fn reordered_header_is_accepted() {
    let ws = Workspace::new();
    let data = ws.write("d.csv", "Outcome,Age,Glucose,Insulin,Polyuria\n1,40,120,0,yes\n0,30,90,80,NO\n");
    let schema = load_schema(ws.write("s.json", STAGE1_SCHEMA)).unwrap();
    let ds = encode_binary(&load_csv(&data, &schema).unwrap()).unwrap();
    assert_eq!(ds.columns()[0].schema.name, "Glucose");
    assert_eq!(ds.require("Polyuria").unwrap().numeric().unwrap(), &[Some(1.0), Some(0.0)]);
    assert_eq!(ds.names_with_role(ColumnRole::Target), ["Outcome"]);
}

#[test]
fn errors_name_their_location() {
    let ws = Workspace::new();
    let schema = load_schema(ws.write("s.json", STAGE1_SCHEMA)).unwrap();
    let missing = ws.write("m.csv", "Glucose,Age,Polyuria,Outcome\n1,2,Yes,0\n");
    match load_csv(&missing, &schema).unwrap_err() {
        Error::Schema { column, .. } => assert_eq!(column, "Insulin"),
        e => panic!("{e}"),
    }
    let bad = ws.write("b.csv", "Glucose,Insulin,Age,Polyuria,Outcome\n1,2,3,Yes,0\n1,2.5.3,3,No,1\n");
    match load_csv(&bad, &schema).unwrap_err() {
        Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (2, "Insulin")),
        e => panic!("{e}"),
    }
    let token = ws.write("t.csv", "Glucose,Insulin,Age,Polyuria,Outcome\n1,2,3,Maybe,0\n");
    let ds = load_csv(&token, &schema).unwrap();
    assert!(matches!(encode_binary(&ds).unwrap_err(), Error::Encoding { token, .. } if token == "Maybe"));
}

#[test]
fn preprocessing_chain_on_synthetic_cohort() {
    let ws = Workspace::new();
    let data = ws.write("d.csv", &stage1_csv(200, 6));
    let schema = load_schema(ws.write("s.json", STAGE1_SCHEMA)).unwrap();
    let ds = encode_binary(&load_csv(&data, &schema).unwrap()).unwrap();
    let (imputed, report) = impute_zero_median(&ds).unwrap();
    assert!(report.imputed["Insulin"] > 0);
    let ins = imputed.require("Insulin").unwrap().observed().unwrap();
    assert!(ins.iter().all(Option::is_some));
    let (filtered, filt) = iqr_filter(&imputed).unwrap();
    assert_eq!(filtered.n_rows() + filt.removed.len(), 200);
    let split = stratified_split(&filtered, 0.2, 3).unwrap();
    assert_eq!(split.train.len() + split.test.len(), filtered.n_rows());
}
