#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include "seisflow.h"

#define CHECK(call)                                                              \
  do {                                                                           \
    SfStatus s_ = (call);                                                        \
    if (s_ != SF_STATUS_OK) {                                                    \
      fprintf(stderr, "%s -> %d %s\n", #call, s_, sf_last_error_message());      \
      return 1;                                                                  \
    }                                                                            \
  } while (0)

static const char *GRAPH =
    "{\"nodes\": {\"scale\": {\"pe\": \"builtin:scale\", \"params\": {\"factor\": 3.0}},"
    " \"total\": {\"pe\": \"builtin:sum\"}},"
    " \"edges\": [{\"from\": \"scale.o\", \"to\": \"total.i\"}],"
    " \"feeds\": {\"in\": \"scale.i\"}}";

static const char *FEEDS =
    "{\"in\": [{\"payload\": {\"kind\": \"scalar\", \"value\": 1.0}},"
    " {\"payload\": {\"kind\": \"scalar\", \"value\": 2.0}}]}";

int main(void) {
  SfEngine *engine = NULL;
  SfGraph *graph = NULL;
  SfRun *run = NULL;
  SfRunStatus status;
  char *outputs = NULL;
  double a[4] = {1, 2, 3, 4}, b[4] = {0, 1, 0, 0}, cc[3];
  size_t nodes = 0;

  CHECK(sf_engine_new(&engine));
  CHECK(sf_graph_parse(GRAPH, &graph));
  CHECK(sf_graph_node_count(graph, &nodes));
  CHECK(sf_engine_run(engine, graph, SF_BACKEND_THREADED, 2, FEEDS, &run));
  CHECK(sf_run_status(run, &status));
  CHECK(sf_run_outputs_json(run, &outputs));
  CHECK(sf_xcorr(a, 4, b, 4, 0.5, 1, cc, 3));
  if (sf_xcorr(a, 4, b, 4, 0.5, 1, cc, 2) != SF_STATUS_BUFFER_TOO_SMALL) return 2;

  printf("version=%s nodes=%zu status=%d run=%s\n", sf_version(), nodes, (int)status, sf_run_id(run));
  printf("outputs=%s\n", outputs);
  printf("cc=%g,%g,%g\n", cc[0], cc[1], cc[2]);
  printf("code=%s\n", sf_last_error_code());

  sf_string_free(outputs);
  sf_run_free(run);
  sf_graph_free(graph);
  sf_engine_free(engine);
  return 0;
}
