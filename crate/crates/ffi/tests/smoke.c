#include <stdio.h>
#include <string.h>
#include "noisebench.h"

int main(void) {
    double a[3] = {1.0, 2.0, 3.0};
    double tau = 0.0;
    if (nb_kendall_tau(a, a, 3, &tau) != NB_OK || tau != 1.0) return 1;
    NbModel *m = NULL;
    if (nb_model_load("/nonexistent.nbck", &m) != NB_IO) return 2;
    char buf[256];
    if (nb_last_error_message(buf, sizeof buf) == 0 || strstr(buf, "nonexistent") == NULL) return 3;
    printf("%s\n", nb_version());
    return 0;
}
