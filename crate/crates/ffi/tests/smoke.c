#include <math.h>
#include <stdio.h>
#include "fsa.h"

int main(void) {
    FsaAggregate agg = {4.0, 1.0, 1.0, 20.0, 8.0, 0.3};
    FsaMetrics m;
    if (fsa_asfr_predict(&agg, 0.1, 50.0, &m) != FSA_STATUS_OK) return 1;
    if (!(m.values[1] < 50.0) || !isfinite(m.values[2])) return 2;
    FsaClass c;
    if (fsa_classify(&m, 50.0, &c) != FSA_STATUS_OK) return 3;
    if (fsa_asfr_predict(NULL, 0.1, 50.0, &m) != FSA_STATUS_NULL_POINTER) return 4;
    FsaPredictor *p = NULL;
    if (fsa_predictor_from_json("[]", &p) != FSA_STATUS_PARSE || p != NULL) return 5;
    if (fsa_predictor_knowledge(&p) != FSA_STATUS_OK) return 6;
    fsa_predictor_free(p);
    printf("%s %d\n", fsa_version(), (int)c);
    return 0;
}
