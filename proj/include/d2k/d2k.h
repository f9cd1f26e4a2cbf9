#ifndef D2K_H
#define D2K_H

/* C interface to the knowledge-base recommendation library. All functions
 * return d2k_status; every out-parameter is written only on D2K_OK. Handles
 * are opaque and freed with their matching *_free function. Strings returned
 * through char** are heap-allocated and released with d2k_string_free.
 * Errors carry a thread-local message readable via d2k_last_error. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum {
  D2K_OK = 0,
  D2K_ERR_INVALID_ARG = 1, /* null handle / bad enum value */
  D2K_ERR_CONFIG = 2,
  D2K_ERR_DATA = 3,
  D2K_ERR_TRAIN = 4,
  D2K_ERR_FORMAT = 5,
  D2K_ERR_METRIC = 6,
  D2K_ERR_INTERNAL = 7,
} d2k_status;

typedef enum {
  D2K_SPLIT_OLD = 0,
  D2K_SPLIT_TRAIN = 1,
  D2K_SPLIT_TEST = 2,
} d2k_split;

typedef enum {
  D2K_UPDATE_RP = 0, /* newer vector replaces the stored one */
  D2K_UPDATE_AP = 1, /* stored and incoming vectors are averaged */
} d2k_update_policy;

typedef struct d2k_schema d2k_schema;
typedef struct d2k_vocab d2k_vocab;
typedef struct d2k_dataset d2k_dataset;
typedef struct d2k_encoder d2k_encoder;
typedef struct d2k_kb d2k_kb;
typedef struct d2k_model d2k_model;

const char* d2k_version(void);
/* Message of the most recent failure on this thread; never NULL. */
const char* d2k_last_error(void);
void d2k_string_free(char* s);

/* ---- schema ---------------------------------------------------------- */
d2k_status d2k_schema_parse(const char* text, d2k_schema** out);
d2k_status d2k_schema_load(const char* path, d2k_schema** out);
d2k_status d2k_schema_serialize(const d2k_schema* schema, char** out);
d2k_status d2k_schema_field_count(const d2k_schema* schema, uint64_t* out);
void d2k_schema_free(d2k_schema* schema);

/* ---- vocabulary ------------------------------------------------------ */
d2k_status d2k_vocab_save(const d2k_vocab* vocab, const char* path);
d2k_status d2k_vocab_load(const char* path, const d2k_schema* schema, d2k_vocab** out);
void d2k_vocab_free(d2k_vocab* vocab);

/* ---- datasets -------------------------------------------------------- */
/* config_json keys (all optional): n_users, n_items, n_ctx, n_groups,
 * n_cats, n_brands, hist_pool, hist_min, hist_max, n_samples, windows,
 * window_seconds, sigma, bias, drift_rate. */
d2k_status d2k_gen_synthetic(const char* config_json, uint64_t seed, d2k_schema** out_schema,
                             d2k_vocab** out_vocab, d2k_dataset** out_data);
/* TSV logs; builds the vocabulary from the data. */
d2k_status d2k_logs_load(const char* path, const d2k_schema* schema, d2k_vocab** out_vocab,
                         d2k_dataset** out_data);
/* TSV logs against a frozen vocabulary; unseen tokens map to the OOV id. */
d2k_status d2k_logs_load_frozen(const char* path, const d2k_schema* schema,
                                const d2k_vocab* vocab, d2k_dataset** out_data);
d2k_status d2k_logs_save(const char* path, const d2k_schema* schema, const d2k_vocab* vocab,
                         const d2k_dataset* data);
d2k_status d2k_dataset_size(const d2k_dataset* data, uint64_t* out);
/* Labels as 0/1 bytes into a caller buffer of d2k_dataset_size entries. */
d2k_status d2k_dataset_labels(const d2k_dataset* data, uint8_t* out);
/* Chronological window split; see the partition rules in the user guide. */
d2k_status d2k_dataset_window(const d2k_dataset* data, int64_t window_seconds, uint64_t p1,
                              uint64_t p2, uint64_t gap, d2k_split which, d2k_dataset** out);
void d2k_dataset_free(d2k_dataset* data);

/* ---- knowledge encoder ------------------------------------------------ */
/* config_json keys: d, dk, heads, knowledge_hidden, ffn_hidden, lr, batch,
 * epochs, plateau_tol, seed. */
d2k_status d2k_encoder_train(const d2k_dataset* old_data, const d2k_schema* schema,
                             const d2k_vocab* vocab, const char* config_json, d2k_encoder** out);
d2k_status d2k_encoder_save(const d2k_encoder* encoder, const char* path);
d2k_status d2k_encoder_load(const char* path, const d2k_schema* schema, d2k_encoder** out);
void d2k_encoder_free(d2k_encoder* encoder);

/* ---- knowledge base ---------------------------------------------------- */
d2k_status d2k_kb_generate(const d2k_dataset* old_data, const d2k_encoder* encoder,
                           const d2k_schema* schema, d2k_kb** out);
/* Returns a new base; the input base is untouched. */
d2k_status d2k_kb_update(const d2k_kb* base, const d2k_dataset* new_data,
                         const d2k_encoder* encoder, const d2k_schema* schema,
                         d2k_update_policy policy, d2k_kb** out);
d2k_status d2k_kb_entry_count(const d2k_kb* kb, uint64_t* out);
d2k_status d2k_kb_stats_json(const d2k_kb* kb, char** out);
d2k_status d2k_kb_save(const d2k_kb* kb, const char* path);
d2k_status d2k_kb_load(const char* path, d2k_kb** out);
void d2k_kb_free(d2k_kb* kb);

/* ---- recommendation model ---------------------------------------------- */
/* config_json keys: d, hidden (array), fm, injection (plain | concat |
 * tower_lr | tower_mlp), adaptation (none | share | sep | small),
 * adapt_layers, d_adp, tower_hidden, lr, batch, epochs, plateau_tol, seed.
 * kb may be NULL for injection = plain. */
d2k_status d2k_model_train(const d2k_dataset* train_data, const d2k_kb* kb,
                           const d2k_schema* schema, const d2k_vocab* vocab,
                           const char* config_json, d2k_model** out);
/* out_scores must hold d2k_dataset_size(data) doubles. */
d2k_status d2k_model_predict(const d2k_model* model, const d2k_dataset* data, const d2k_kb* kb,
                             double* out_scores);
d2k_status d2k_model_save(const d2k_model* model, const char* path);
d2k_status d2k_model_load(const char* path, const d2k_schema* schema, d2k_model** out);
void d2k_model_free(d2k_model* model);

/* ---- evaluation, experiments, benchmarks -------------------------------- */
d2k_status d2k_metrics(const double* scores, const uint8_t* labels, uint64_t n, double* out_auc,
                       double* out_logloss);

/* config_json keys: gen {...}, data_seed, p1, p2, gap, methods (array of
 * fixed_r | fixed_a | incremental | random_coreset | d2k_base |
 * d2k_adp_share | d2k_adp_sep | d2k_adp_small | direct_only |
 * direct_only_adp), seeds (array), encoder {...}, backbone {...}, direct
 * {d, lr, batch, epochs, plateau_tol, adapt_layers}, injection,
 * coreset_frac, incr_max_epochs, incr_tol, kb_subset (array of names).
 * out_all_ok is 1 when every cell succeeded. */
d2k_status d2k_run_experiment(const char* config_json, char** out_jsonl, char** out_table,
                              int* out_all_ok);

d2k_status d2k_bench_retrieval(const d2k_kb* kb, const d2k_dataset* data,
                               const d2k_schema* schema, uint64_t batch, char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* D2K_H */
