//! Enrichment engine behavior: classification, the safety-check functions,
//! evaluation models, freshness vs staleness, and spill invariance.

use idea::data::{Datatype, Record, Value, ValueKind};
use idea::eval::{
    classify, compile_function, evaluate_batch, evaluate_record, open_stream_evaluator,
    CompileOptions, EvalContext, EvalError, FunctionCatalog, FunctionDecl, FunctionDeclBody,
    NativeRegistry, Statefulness,
};
use idea::query::parse_function_body;
use idea::record;
use idea::storage::{DatasetDescriptor, IndexDescriptor, IndexKind, StorageEngine};
use std::sync::Arc;

const STATELESS_SAFETY_BODY: &str = r#"
    LET safety_check_flag =
      CASE tweet.country = "US" AND contains(tweet.text, "bomb")
        WHEN true THEN "Red" ELSE "Green"
      END
    SELECT tweet.*, safety_check_flag
"#;

const KEYWORD_SAFETY_BODY: &str = r#"
    LET safety_check_flag = CASE
      EXISTS(SELECT s FROM SensitiveWords s
          WHERE tweet.country = s.country AND
          contains(tweet.text, s.word))
      WHEN true THEN "Red" ELSE "Green"
      END
    SELECT tweet.*, safety_check_flag
"#;

const HIGH_RISK_BODY: &str = r#"
    LET high_risk_flag = CASE
      t.country IN (SELECT VALUE s.country
        FROM SensitiveWords s
        GROUP BY s.country
        ORDER BY count(s) DESC
        LIMIT 10)
      WHEN true THEN "Red" ELSE "Green"
    END
    SELECT t.*, high_risk_flag
"#;

fn decl(name: &str, param: &str, body: &str) -> FunctionDecl {
    FunctionDecl {
        name: name.into(),
        params: vec![param.into()],
        body: FunctionDeclBody::Query(parse_function_body(body).unwrap()),
    }
}

fn sensitive_words_store() -> Arc<StorageEngine> {
    let storage = StorageEngine::new();
    storage
        .create_dataset(DatasetDescriptor::new(
            "SensitiveWords",
            Datatype::new(
                "SensitiveWordType",
                vec![
                    ("id".into(), ValueKind::Int64),
                    ("country".into(), ValueKind::Text),
                    ("word".into(), ValueKind::Text),
                ],
                true,
            ),
            vec!["id".into()],
            2,
        ))
        .unwrap();
    storage
}

fn word(id: i64, country: &str, word: &str) -> Record {
    record! {
        "id" => Value::Int64(id),
        "country" => Value::Text(country.into()),
        "word" => Value::Text(word.into()),
    }
}

fn tweet(id: i64, country: &str, text: &str) -> Record {
    record! {
        "id" => Value::Int64(id),
        "text" => Value::Text(text.into()),
        "country" => Value::Text(country.into()),
    }
}

fn flag_of(rec: &Record) -> &str {
    rec.field("safety_check_flag").as_text().unwrap_or("?")
}

#[test]
fn classification_follows_body_shape() {
    let stateless = decl("f1", "tweet", STATELESS_SAFETY_BODY);
    assert_eq!(classify(&stateless), Statefulness::Stateless);

    let stateful = decl("f2", "tweet", KEYWORD_SAFETY_BODY);
    assert_eq!(classify(&stateful), Statefulness::Stateful);

    let native_with_resource = FunctionDecl {
        name: "kw".into(),
        params: vec!["r".into()],
        body: FunctionDeclBody::Native {
            factory: "kw".into(),
            resource: Some("/tmp/words.txt".into()),
        },
    };
    assert_eq!(classify(&native_with_resource), Statefulness::Stateful);

    let native_plain = FunctionDecl {
        name: "clean".into(),
        params: vec!["s".into()],
        body: FunctionDeclBody::Native {
            factory: "removeSpecial".into(),
            resource: None,
        },
    };
    assert_eq!(classify(&native_plain), Statefulness::Stateless);
}

#[test]
fn stateless_safety_check_flags_by_country_and_text() {
    let storage = StorageEngine::new();
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("check", "tweet", STATELESS_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();

    let out = evaluate_batch(
        &f,
        &[
            tweet(1, "US", "there is a bomb threat"),
            tweet(2, "US", "hello world"),
            tweet(3, "FR", "another bomb mention"),
        ],
        &ctx,
    )
    .unwrap();
    assert_eq!(out.records.len(), 3);
    assert!(out.skipped.is_empty());
    assert_eq!(flag_of(&out.records[0]), "Red");
    assert_eq!(flag_of(&out.records[1]), "Green");
    assert_eq!(flag_of(&out.records[2]), "Green");
    // input fields preserved, in order, with the flag appended
    let names: Vec<&str> = out.records[0].iter().map(|(n, _)| n).collect();
    assert_eq!(names, vec!["id", "text", "country", "safety_check_flag"]);
}

#[test]
fn keyword_function_joins_reference_data() {
    let storage = sensitive_words_store();
    let ds = storage.dataset("SensitiveWords").unwrap();
    ds.upsert(word(1, "US", "bomb")).unwrap();
    ds.upsert(word(2, "FR", "explosif")).unwrap();
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("check", "tweet", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();

    let out = evaluate_batch(
        &f,
        &[
            tweet(1, "US", "bomb here"),
            tweet(2, "FR", "bomb here"),     // wrong country for that word
            tweet(3, "FR", "explosif here"),
            tweet(4, "DE", "explosif here"),
        ],
        &ctx,
    )
    .unwrap();
    let flags: Vec<&str> = out.records.iter().map(flag_of).collect();
    assert_eq!(flags, vec!["Red", "Green", "Red", "Green"]);
}

#[test]
fn empty_reference_dataset_flags_everything_green() {
    let storage = sensitive_words_store();
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("check", "tweet", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let out = evaluate_batch(&f, &[tweet(1, "US", "bomb")], &ctx).unwrap();
    assert_eq!(flag_of(&out.records[0]), "Green");
}

#[test]
fn per_record_model_sees_reference_updates_immediately() {
    let storage = sensitive_words_store();
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("check", "tweet", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();

    let t = tweet(1, "US", "new threat word: zephyr");
    let before = evaluate_record(&f, &t, &ctx).unwrap();
    assert_eq!(flag_of(&before), "Green");
    storage
        .dataset("SensitiveWords")
        .unwrap()
        .upsert(word(9, "US", "zephyr"))
        .unwrap();
    let after = evaluate_record(&f, &t, &ctx).unwrap();
    assert_eq!(flag_of(&after), "Red");
}

#[test]
fn stream_model_rejects_stateful_by_default_and_freezes_state_when_allowed() {
    let storage = sensitive_words_store();
    let ds = storage.dataset("SensitiveWords").unwrap();
    ds.upsert(word(1, "US", "bomb")).unwrap();
    let natives = NativeRegistry::with_builtins();
    let f = compile_function(
        &decl("check", "tweet", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();

    // default policy: stateful functions cannot stream
    let strict = EvalContext::new(storage.clone(), natives.clone());
    assert!(matches!(
        open_stream_evaluator(&f, &strict),
        Err(EvalError::StatefulStreamRejected)
    ));

    // opt-in stale streaming: the build side is read once at open
    let stale = EvalContext::new(storage.clone(), natives.clone()).with_stale_stream(true);
    let evaluator = open_stream_evaluator(&f, &stale).unwrap();
    ds.upsert(word(2, "US", "zephyr")).unwrap(); // after open: never visible
    let out = evaluator.apply(&[
        tweet(1, "US", "zephyr alert"),
        tweet(2, "US", "bomb alert"),
    ]);
    assert_eq!(flag_of(&out.records[0]), "Green");
    assert_eq!(flag_of(&out.records[1]), "Red");

    // stateless functions stream without any flag
    let stateless = compile_function(
        &decl("f", "tweet", STATELESS_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    assert!(open_stream_evaluator(&stateless, &strict).is_ok());
}

#[test]
fn stream_build_overflow_when_reference_exceeds_budget() {
    let storage = sensitive_words_store();
    let ds = storage.dataset("SensitiveWords").unwrap();
    for i in 0..3000 {
        ds.upsert(word(i, "US", &format!("padddddddddddddddddddddddword{i}")))
            .unwrap();
    }
    let natives = NativeRegistry::with_builtins();
    let f = compile_function(
        &decl("check", "tweet", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let tiny = EvalContext::new(storage.clone(), natives.clone())
        .with_stale_stream(true)
        .with_join_budget(0); // clamps to the minimum, still < the build
    assert!(matches!(
        open_stream_evaluator(&f, &tiny),
        Err(EvalError::StreamBuildOverflow { .. })
    ));
}

#[test]
fn batch_model_spills_oversized_builds_with_identical_results() {
    let storage = StorageEngine::new();
    storage
        .create_dataset(DatasetDescriptor::new(
            "SafetyRatings",
            Datatype::new(
                "SafetyRatingType",
                vec![
                    ("country_code".into(), ValueKind::Text),
                    ("safety_rating".into(), ValueKind::Text),
                ],
                true,
            ),
            vec!["country_code".into()],
            2,
        ))
        .unwrap();
    let ratings = storage.dataset("SafetyRatings").unwrap();
    let mut fixtures = Vec::new();
    for i in 0..2000 {
        fixtures.push(record! {
            "country_code" => Value::Text(format!("C{:04}", i % 300)),
            "safety_rating" => Value::Text(format!("{}", i % 5)),
            "pad" => Value::Text("x".repeat(60)),
        });
    }
    ratings.bulk_load(fixtures).unwrap();

    let body = r#"
        LET safety_rating = (SELECT VALUE s.safety_rating
          FROM SafetyRatings s
          WHERE t.country = s.country_code)
        SELECT t.*, safety_rating
    "#;
    let natives = NativeRegistry::with_builtins();
    let f = compile_function(
        &decl("rate", "t", body),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();

    let batch: Vec<Record> = (0..200)
        .map(|i| tweet(i, &format!("C{:04}", i % 300), "hello"))
        .collect();
    let roomy = EvalContext::new(storage.clone(), natives.clone());
    let tight = EvalContext::new(storage.clone(), natives.clone()).with_join_budget(70_000);
    assert!(ratings.approx_bytes() > 70_000, "fixture too small to spill");

    let in_memory = evaluate_batch(&f, &batch, &roomy).unwrap();
    let spilled = evaluate_batch(&f, &batch, &tight).unwrap();
    assert_eq!(in_memory.records.len(), 200);
    assert_eq!(in_memory.records, spilled.records);
}

#[test]
fn model_equivalence_on_static_reference_data() {
    let storage = sensitive_words_store();
    let ds = storage.dataset("SensitiveWords").unwrap();
    for i in 0..40 {
        ds.upsert(word(i, if i % 2 == 0 { "US" } else { "FR" }, &format!("w{i}")))
            .unwrap();
    }
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("check", "tweet", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();

    let batch: Vec<Record> = (0..50)
        .map(|i| {
            tweet(
                i,
                if i % 3 == 0 { "US" } else { "FR" },
                &format!("text w{} more", i % 45),
            )
        })
        .collect();
    let whole = evaluate_batch(&f, &batch, &ctx).unwrap().records;
    let mut per_record = Vec::new();
    for t in &batch {
        per_record.push(evaluate_record(&f, t, &ctx).unwrap());
    }
    assert_eq!(whole, per_record);
    // concatenation across any batch split equals the whole
    let mut split = Vec::new();
    for chunk in batch.chunks(7) {
        split.extend(evaluate_batch(&f, chunk, &ctx).unwrap().records);
    }
    assert_eq!(whole, split);
}

#[test]
fn grouped_in_subquery_selects_top_countries() {
    let storage = sensitive_words_store();
    let ds = storage.dataset("SensitiveWords").unwrap();
    // CC1 has 3 words, CC2 has 2, many others 1 word each
    let mut id = 0;
    let mut add = |country: &str, n: usize| {
        for k in 0..n {
            ds.upsert(word(id, country, &format!("{country}-w{k}"))).unwrap();
            id += 1;
        }
    };
    add("CC1", 3);
    add("CC2", 2);
    for i in 0..12 {
        add(&format!("X{i:02}"), 1);
    }
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("risk", "t", HIGH_RISK_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let out = evaluate_batch(
        &f,
        &[tweet(1, "CC1", "x"), tweet(2, "X03", "x"), tweet(3, "ZZ", "x")],
        &ctx,
    )
    .unwrap();
    let flags: Vec<&str> = out
        .records
        .iter()
        .map(|r| r.field("high_risk_flag").as_text().unwrap())
        .collect();
    // CC1 and CC2 always make the top 10 by count; ZZ has no words at all
    assert_eq!(flags[0], "Red");
    assert_eq!(flags[2], "Green");
}

#[test]
fn take_first_collapses_single_row_aggregates() {
    let storage = StorageEngine::new();
    storage
        .create_dataset(DatasetDescriptor::new(
            "ReligiousPopulations",
            Datatype::new(
                "ReligiousPopulationType",
                vec![
                    ("rid".into(), ValueKind::Text),
                    ("country_name".into(), ValueKind::Text),
                    ("religion_name".into(), ValueKind::Text),
                    ("population".into(), ValueKind::Int64),
                ],
                true,
            ),
            vec!["rid".into()],
            2,
        ))
        .unwrap();
    let ds = storage.dataset("ReligiousPopulations").unwrap();
    for (rid, country, religion, pop) in [
        ("r1", "US", "a", 10),
        ("r2", "US", "b", 20),
        ("r3", "US", "c", 30),
        ("r4", "FR", "a", 7),
    ] {
        ds.upsert(record! {
            "rid" => Value::Text(rid.into()),
            "country_name" => Value::Text(country.into()),
            "religion_name" => Value::Text(religion.into()),
            "population" => Value::Int64(pop),
        })
        .unwrap();
    }
    let body = r#"
        LET religious_population =
          (SELECT sum(r.population) FROM
          ReligiousPopulations r
          WHERE r.country_name = t.country)[0]
        SELECT t.*, religious_population
    "#;
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("pop", "t", body),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let out = evaluate_batch(&f, &[tweet(1, "US", "x"), tweet(2, "ZZ", "x")], &ctx).unwrap();
    // sum over {10,20,30} in one group
    let Value::Object(obj) = out.records[0].field("religious_population") else {
        panic!("expected an object: {:?}", out.records[0]);
    };
    assert_eq!(obj.field("$1"), &Value::Int64(60));
    // no matches: the implicit group still yields one row with a null sum
    let Value::Object(obj) = out.records[1].field("religious_population") else {
        panic!("expected an object");
    };
    assert_eq!(obj.field("$1"), &Value::Null);
}

#[test]
fn order_by_limit_returns_extremes_with_pk_tie_break() {
    let storage = StorageEngine::new();
    storage
        .create_dataset(DatasetDescriptor::new(
            "ReligiousPopulations",
            Datatype::new(
                "T",
                vec![
                    ("rid".into(), ValueKind::Text),
                    ("country_name".into(), ValueKind::Text),
                    ("religion_name".into(), ValueKind::Text),
                    ("population".into(), ValueKind::Int64),
                ],
                true,
            ),
            vec!["rid".into()],
            2,
        ))
        .unwrap();
    let ds = storage.dataset("ReligiousPopulations").unwrap();
    for (rid, rel, pop) in [
        ("r1", "a", 30),
        ("r2", "b", 10),
        ("r3", "c", 20),
        ("r4", "d", 10),
        ("r5", "e", 40),
    ] {
        ds.upsert(record! {
            "rid" => Value::Text(rid.into()),
            "country_name" => Value::Text("US".into()),
            "religion_name" => Value::Text(rel.into()),
            "population" => Value::Int64(pop),
        })
        .unwrap();
    }
    let body = r#"
        LET largest_religions =
          (SELECT VALUE r.religion_name
          FROM ReligiousPopulations r
          WHERE r.country_name = t.country
          ORDER BY r.population LIMIT 3)
        SELECT t.*, largest_religions
    "#;
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("rel", "t", body),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let out = evaluate_batch(&f, &[tweet(1, "US", "x")], &ctx).unwrap();
    // ascending population: 10 (r2), 10 (r4, pk tie-break), 20 (r3)
    assert_eq!(
        out.records[0].field("largest_religions"),
        &Value::Array(vec![
            Value::Text("b".into()),
            Value::Text("d".into()),
            Value::Text("c".into()),
        ])
    );
    // k larger than the candidate count returns everything
    let body_k10 = body.replace("LIMIT 3", "LIMIT 10");
    let f10 = compile_function(
        &decl("rel10", "t", &body_k10),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let out10 = evaluate_batch(&f10, &[tweet(1, "US", "x")], &ctx).unwrap();
    let Value::Array(items) = out10.records[0].field("largest_religions") else {
        panic!();
    };
    assert_eq!(items.len(), 5);
}

#[test]
fn spatial_index_probe_matches_naive_plan() {
    let storage = StorageEngine::new();
    storage
        .create_dataset(DatasetDescriptor::new(
            "monumentList",
            Datatype::new(
                "monumentType",
                vec![
                    ("monument_id".into(), ValueKind::Text),
                    ("monument_location".into(), ValueKind::Point),
                ],
                true,
            ),
            vec!["monument_id".into()],
            2,
        ))
        .unwrap();
    let ds = storage.dataset("monumentList").unwrap();
    let mut fixtures = Vec::new();
    let mut state = 11u64;
    for i in 0..800 {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let x = ((state >> 13) % 3600) as f64 / 10.0 - 180.0;
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let y = ((state >> 13) % 1800) as f64 / 10.0 - 90.0;
        fixtures.push(record! {
            "monument_id" => Value::Text(format!("m{i:04}")),
            "monument_location" => Value::Point(idea::data::Point::new(x, y)),
        });
    }
    ds.bulk_load(fixtures).unwrap();
    ds.create_index(IndexDescriptor {
        name: "monument_location_idx".into(),
        kind: IndexKind::RTree {
            point_field: "monument_location".into(),
        },
    })
    .unwrap();

    let body = r#"
        LET nearby_monuments =
          (SELECT VALUE m.monument_id
          FROM monumentList m
          WHERE spatial_intersect(
            m.monument_location,
            create_circle(
              create_point(t.latitude, t.longitude),
                1.5)))
        SELECT t.*, nearby_monuments
    "#;
    let natives = NativeRegistry::with_builtins();
    let f_indexed = compile_function(
        &decl("near", "t", body),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let f_naive = compile_function(
        &decl("near_naive", "t", body),
        &storage,
        &natives,
        CompileOptions {
            use_indexes: false,
            allow_function_calls: false,
        },
    )
    .unwrap();
    let ctx_indexed = EvalContext::new(storage.clone(), natives.clone());
    let ctx_naive = EvalContext::new(storage.clone(), natives.clone()).with_indexes(false);

    let probes: Vec<Record> = (0..60)
        .map(|i| {
            record! {
                "id" => Value::Int64(i),
                "latitude" => Value::Float64((i as f64 * 5.7) % 170.0 - 85.0),
                "longitude" => Value::Float64((i as f64 * 11.3) % 350.0 - 175.0),
            }
        })
        .collect();
    let with_index = evaluate_batch(&f_indexed, &probes, &ctx_indexed).unwrap();
    let naive = evaluate_batch(&f_naive, &probes, &ctx_naive).unwrap();
    assert_eq!(with_index.records, naive.records);
    // at least one probe should actually match something
    assert!(with_index.records.iter().any(|r| {
        matches!(r.field("nearby_monuments"), Value::Array(items) if !items.is_empty())
    }));
}

#[test]
fn failing_records_are_skipped_not_fatal() {
    let storage = StorageEngine::new();
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    // contains() over a non-text field is a type error for that record only
    let f = compile_function(
        &decl("check", "tweet", STATELESS_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let bad = record! {
        "id" => Value::Int64(2),
        "text" => Value::Int64(42),
        "country" => Value::Text("US".into()),
    };
    let out = evaluate_batch(
        &f,
        &[tweet(1, "US", "fine"), bad, tweet(3, "US", "bomb")],
        &ctx,
    )
    .unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].0, 1);
    assert_eq!(flag_of(&out.records[1]), "Red");
}

#[test]
fn native_call_inside_declarative_body() {
    let storage = StorageEngine::new();
    storage
        .create_dataset(DatasetDescriptor::new(
            "SensitiveNamesDataset",
            Datatype::new(
                "SensitiveNameType",
                vec![
                    ("name_id".into(), ValueKind::Text),
                    ("sensitiveName".into(), ValueKind::Text),
                    ("religionName".into(), ValueKind::Text),
                ],
                true,
            ),
            vec!["name_id".into()],
            2,
        ))
        .unwrap();
    let ds = storage.dataset("SensitiveNamesDataset").unwrap();
    for (id, name, rel) in [("n1", "jdoe", "x"), ("n2", "jdoerus", "y"), ("n3", "zzzzzzzzzz", "z")] {
        ds.upsert(record! {
            "name_id" => Value::Text(id.into()),
            "sensitiveName" => Value::Text(name.into()),
            "religionName" => Value::Text(rel.into()),
        })
        .unwrap();
    }
    let body = r#"
        LET related_suspects=(
          SELECT s.sensitiveName, s.religionName
          FROM SensitiveNamesDataset s
          WHERE edit_distance(
            testlib#removeSpecial(x.user.screen_name),
            s.sensitiveName) < 5)
        SELECT x.*, related_suspects
    "#;
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let f = compile_function(
        &decl("suspects", "x", body),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap();
    let probe = record! {
        "id" => Value::Int64(1),
        "user" => Value::Object(record! {
            "screen_name" => Value::Text("J_Doe99!".into()),
            "name" => Value::Text("J Doe".into()),
        }),
    };
    let out = evaluate_batch(&f, &[probe], &ctx).unwrap();
    let Value::Array(matches) = out.records[0].field("related_suspects") else {
        panic!("expected array");
    };
    // removeSpecial("J_Doe99!") = "jdoe": distance 0 to "jdoe", 3 to "jdoerus"
    assert_eq!(matches.len(), 2);
    let Value::Object(first) = &matches[0] else { panic!() };
    assert_eq!(first.field("sensitiveName"), &Value::Text("jdoe".into()));
    assert_eq!(first.iter().map(|(n, _)| n).collect::<Vec<_>>(), vec!["sensitiveName", "religionName"]);
}

#[test]
fn unknown_dataset_fails_at_compile() {
    let storage = StorageEngine::new();
    let natives = NativeRegistry::with_builtins();
    let err = compile_function(
        &decl("f", "t", KEYWORD_SAFETY_BODY),
        &storage,
        &natives,
        CompileOptions::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("SensitiveWords"), "{err}");
}

#[test]
fn query_with_function_call_and_grouping() {
    let storage = sensitive_words_store();
    let ds = storage.dataset("SensitiveWords").unwrap();
    ds.upsert(word(1, "US", "bomb")).unwrap();
    storage
        .create_dataset(DatasetDescriptor::new(
            "Tweets",
            Datatype::new(
                "TweetType",
                vec![
                    ("id".into(), ValueKind::Int64),
                    ("text".into(), ValueKind::Text),
                ],
                true,
            ),
            vec!["id".into()],
            2,
        ))
        .unwrap();
    let tweets = storage.dataset("Tweets").unwrap();
    tweets.upsert(tweet(1, "US", "bomb a")).unwrap();
    tweets.upsert(tweet(2, "US", "quiet")).unwrap();
    tweets.upsert(tweet(3, "FR", "bomb b")).unwrap();
    tweets.upsert(tweet(4, "US", "bomb c")).unwrap();

    let functions = FunctionCatalog::new();
    functions.register(decl("tweetSafetyCheck", "tweet", KEYWORD_SAFETY_BODY));
    let natives = NativeRegistry::with_builtins();
    let ctx = EvalContext::new(storage.clone(), natives.clone());
    let q = idea::query::parse_statement(
        r#"SELECT tweet.country Country, count(tweet) Num
           FROM Tweets tweet
           LET enrichedTweet = tweetSafetyCheck(tweet)[0]
           WHERE enrichedTweet.safety_check_flag = "Red"
           GROUP BY tweet.country;"#,
    )
    .unwrap();
    let idea::query::StatementKind::Query(q) = q.kind else {
        panic!();
    };
    let rows = idea::eval::run_query(&q, &ctx, &functions).unwrap();
    assert_eq!(rows.len(), 1, "{rows:?}");
    let Value::Object(row) = &rows[0] else { panic!() };
    assert_eq!(row.field("Country"), &Value::Text("US".into()));
    assert_eq!(row.field("Num"), &Value::Int64(2));
}
