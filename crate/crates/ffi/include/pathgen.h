#ifndef PATHGEN_H
#define PATHGEN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_ARGUMENT = 1,
  PG_STATUS_INVALID_UTF8 = 2,
  PG_STATUS_IO = 3,
  PG_STATUS_PARSE = 4,
  PG_STATUS_LOOKUP = 5,
  PG_STATUS_OUT_OF_VOCAB = 6,
  PG_STATUS_INVALID = 7,
  PG_STATUS_CONFIG = 8,
  PG_STATUS_CHECKPOINT = 9,
  PG_STATUS_INTERNAL = 10,
  PG_STATUS_PANIC = 11,
} PgStatus;

typedef struct PgGenerator PgGenerator;

typedef struct PgKg PgKg;

typedef struct PgScorer PgScorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *pg_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call on this thread.
 */
const char *pg_last_error(void);

/**
 * Load a `head<TAB>relation<TAB>tail` file with the default discard set.
 */
enum PgStatus pg_kg_load(const char *path, struct PgKg **out);

void pg_kg_free(struct PgKg *kg);

enum PgStatus pg_kg_num_entities(const struct PgKg *kg, size_t *out);

/**
 * Number of stored triplets, inverse edges excluded.
 */
enum PgStatus pg_kg_num_triplets(const struct PgKg *kg, size_t *out);

/**
 * Whether the fact is in the graph; unknown names give false. Inverse
 * relation names ("_IsA") are accepted.
 */
enum PgStatus pg_kg_has_triplet(const struct PgKg *kg,
                                const char *head,
                                const char *relation,
                                const char *tail,
                                bool *out);

enum PgStatus pg_generator_load(const char *path, struct PgGenerator **out);

void pg_generator_free(struct PgGenerator *generator);

/**
 * Greedy path from `source` to `target` as a JSON object with the token
 * ids, rendered text and decoded path. `kg` may be NULL; when given, the
 * decoded entities and relations are marked against it. Release the
 * string with `pg_string_free`.
 */
enum PgStatus pg_generator_generate(const struct PgGenerator *generator,
                                    const struct PgKg *kg,
                                    const char *source,
                                    const char *target,
                                    char **out_json);

/**
 * Release a string returned by this library.
 */
void pg_string_free(char *s);

enum PgStatus pg_scorer_load(const char *path, struct PgScorer **out);

void pg_scorer_free(struct PgScorer *scorer);

/**
 * Plausibility in (0, 1). Unknown entities share one embedding; an
 * unknown relation is a `PG_STATUS_LOOKUP` error.
 */
enum PgStatus pg_scorer_score(const struct PgScorer *scorer,
                              const char *head,
                              const char *relation,
                              const char *tail,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATHGEN_H */
