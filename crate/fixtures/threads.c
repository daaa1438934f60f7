/* Two threads each calling work() argv[1] times. */
#include <pthread.h>
#include <stdio.h>
#include <stdlib.h>

static unsigned long n;

__attribute__((noinline)) unsigned long work(unsigned long i)
{
	return i * 2654435761UL;
}

static void *worker(void *arg)
{
	unsigned long sum = 0;

	for (unsigned long i = 0; i < n; i++)
		sum += work(i);
	*(unsigned long *)arg = sum;
	return NULL;
}

int main(int argc, char **argv)
{
	pthread_t t[2];
	unsigned long sums[2];

	n = argc > 1 ? strtoul(argv[1], NULL, 10) : 1000;
	for (int i = 0; i < 2; i++)
		pthread_create(&t[i], NULL, worker, &sums[i]);
	for (int i = 0; i < 2; i++)
		pthread_join(t[i], NULL);
	printf("threads n=%lu checksum=%016lx\n", n, sums[0] + sums[1]);
	return 0;
}
